use super::conv::{max_pool2, max_pool2_backward, Conv2d};
use super::param::{join, Param, Parameterized};
use super::Float;
use ndarray::{concatenate, s, Array4, Axis};

/// Composable convolutional building block.
///
/// Backbones are trees of blocks; every variant knows its own backward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Block<T> {
    Conv(Conv2d<T>),
    Relu,
    MaxPool2,
    Seq(Vec<Block<T>>),
    /// `post(shortcut(x) + scale * body(x))`; identity shortcut when `None`.
    Residual {
        body: Box<Block<T>>,
        shortcut: Option<Conv2d<T>>,
        scale: f64,
        post_relu: bool,
    },
    /// Branches applied to the same input, concatenated along channels.
    Concat(Vec<Block<T>>),
}

/// Activations saved by a training forward pass.
#[derive(Debug)]
pub enum BlockCache<T> {
    Conv(Array4<T>),
    Relu(Array4<T>),
    MaxPool(Vec<u32>, (usize, usize, usize, usize)),
    Seq(Vec<BlockCache<T>>),
    Residual {
        body: Box<BlockCache<T>>,
        input: Option<Array4<T>>,
        output: Option<Array4<T>>,
    },
    Concat(Vec<BlockCache<T>>, Vec<usize>),
}

fn relu<T: Float>(mut x: Array4<T>) -> Array4<T> {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    x
}

fn relu_backward<T: Float>(out: &Array4<T>, mut dy: Array4<T>) -> Array4<T> {
    ndarray::Zip::from(&mut dy).and(out).for_each(|g, &v| {
        if v <= T::zero() {
            *g = T::zero();
        }
    });
    dy
}

impl<T: Float> Block<T> {
    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        self.run(x, false).0
    }

    pub fn forward_train(&self, x: &Array4<T>) -> (Array4<T>, BlockCache<T>) {
        let (y, c) = self.run(x, true);
        (y, c.expect("cache requested"))
    }

    fn run(&self, x: &Array4<T>, keep: bool) -> (Array4<T>, Option<BlockCache<T>>) {
        match self {
            Block::Conv(conv) => {
                let y = conv.forward(x);
                (y, keep.then(|| BlockCache::Conv(x.clone())))
            }
            Block::Relu => {
                let y = relu(x.clone());
                let c = keep.then(|| BlockCache::Relu(y.clone()));
                (y, c)
            }
            Block::MaxPool2 => {
                let (y, arg) = max_pool2(x);
                (y, keep.then(|| BlockCache::MaxPool(arg, x.dim())))
            }
            Block::Seq(items) => {
                let mut caches = Vec::with_capacity(if keep { items.len() } else { 0 });
                let mut cur: Option<Array4<T>> = None;
                for item in items {
                    let input = cur.as_ref().unwrap_or(x);
                    let (y, c) = item.run(input, keep);
                    if let Some(c) = c {
                        caches.push(c);
                    }
                    cur = Some(y);
                }
                (cur.unwrap_or_else(|| x.clone()), keep.then_some(BlockCache::Seq(caches)))
            }
            Block::Residual { body, shortcut, scale, post_relu } => {
                let (b, bc) = body.run(x, keep);
                let mut y = match shortcut {
                    Some(conv) => conv.forward(x),
                    None => x.clone(),
                };
                y.scaled_add(T::of(*scale), &b);
                if *post_relu {
                    y = relu(y);
                }
                let cache = keep.then(|| BlockCache::Residual {
                    body: Box::new(bc.expect("body cache")),
                    input: shortcut.as_ref().map(|_| x.clone()),
                    output: post_relu.then(|| y.clone()),
                });
                (y, cache)
            }
            Block::Concat(branches) => {
                let mut outs = Vec::with_capacity(branches.len());
                let mut caches = Vec::new();
                for br in branches {
                    let (y, c) = br.run(x, keep);
                    outs.push(y);
                    if let Some(c) = c {
                        caches.push(c);
                    }
                }
                let widths: Vec<usize> = outs.iter().map(|o| o.dim().1).collect();
                let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
                let y = concatenate(Axis(1), &views).expect("branch spatial sizes agree");
                let y = y.as_standard_layout().into_owned();
                (y, keep.then_some(BlockCache::Concat(caches, widths)))
            }
        }
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_dx`.
    pub fn backward(&mut self, cache: BlockCache<T>, dy: Array4<T>, need_dx: bool) -> Option<Array4<T>> {
        match (self, cache) {
            (Block::Conv(conv), BlockCache::Conv(x)) => conv.backward(&x, &dy, need_dx),
            (Block::Relu, BlockCache::Relu(out)) => need_dx.then(|| relu_backward(&out, dy)),
            (Block::MaxPool2, BlockCache::MaxPool(arg, shape)) => {
                need_dx.then(|| max_pool2_backward(&dy, &arg, shape))
            }
            (Block::Seq(items), BlockCache::Seq(caches)) => {
                let n = items.len();
                let mut grad = Some(dy);
                for (i, (item, c)) in items.iter_mut().zip(caches).enumerate().rev() {
                    let g = grad.take().expect("upstream gradient");
                    grad = item.backward(c, g, need_dx || i > 0);
                }
                if n == 0 {
                    return None;
                }
                grad
            }
            (Block::Residual { body, shortcut, scale, post_relu }, BlockCache::Residual { body: bc, input, output }) => {
                let dy = if *post_relu {
                    relu_backward(output.as_ref().expect("post-relu output"), dy)
                } else {
                    dy
                };
                let dbody = dy.mapv(|v| v * T::of(*scale));
                let dx_body = body.backward(*bc, dbody, need_dx);
                let dx_short = match shortcut {
                    Some(conv) => conv.backward(input.as_ref().expect("shortcut input"), &dy, need_dx),
                    None => need_dx.then_some(dy),
                };
                match (dx_body, dx_short) {
                    (Some(mut a), Some(b)) => {
                        a += &b;
                        Some(a)
                    }
                    _ => None,
                }
            }
            (Block::Concat(branches), BlockCache::Concat(caches, widths)) => {
                let mut dx: Option<Array4<T>> = None;
                let mut start = 0;
                for ((br, c), w) in branches.iter_mut().zip(caches).zip(widths) {
                    let part = dy.slice(s![.., start..start + w, .., ..]).to_owned();
                    start += w;
                    if let Some(g) = br.backward(c, part, need_dx) {
                        match dx.as_mut() {
                            Some(acc) => *acc += &g,
                            None => dx = Some(g),
                        }
                    }
                }
                dx
            }
            _ => panic!("block cache does not match block structure"),
        }
    }
}

impl<T: Float> Parameterized<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Block::Conv(c) => c.visit(prefix, f),
            Block::Relu | Block::MaxPool2 => {}
            Block::Seq(items) | Block::Concat(items) => {
                for (i, it) in items.iter().enumerate() {
                    it.visit(&join(prefix, &i.to_string()), f);
                }
            }
            Block::Residual { body, shortcut, .. } => {
                body.visit(&join(prefix, "body"), f);
                if let Some(s) = shortcut {
                    s.visit(&join(prefix, "shortcut"), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Block::Conv(c) => c.visit_mut(prefix, f),
            Block::Relu | Block::MaxPool2 => {}
            Block::Seq(items) | Block::Concat(items) => {
                for (i, it) in items.iter_mut().enumerate() {
                    it.visit_mut(&join(prefix, &i.to_string()), f);
                }
            }
            Block::Residual { body, shortcut, .. } => {
                body.visit_mut(&join(prefix, "body"), f);
                if let Some(s) = shortcut {
                    s.visit_mut(&join(prefix, "shortcut"), f);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn tiny_tree(rng: &mut ChaCha8Rng) -> Block<f64> {
        let branch_a = Block::Seq(vec![Block::Conv(Conv2d::new(2, 2, 1, 1, 0, rng)), Block::Relu]);
        let branch_b = Block::Seq(vec![
            Block::Conv(Conv2d::new(2, 1, 1, 1, 0, rng)),
            Block::Relu,
            Block::Conv(Conv2d::new(1, 2, 3, 1, 1, rng)),
        ]);
        Block::Seq(vec![
            Block::Conv(Conv2d::new(3, 2, 3, 1, 1, rng)),
            Block::Relu,
            Block::Residual {
                body: Box::new(Block::Seq(vec![
                    Block::Concat(vec![branch_a, branch_b]),
                    Block::Conv(Conv2d::new(4, 2, 1, 1, 0, rng)),
                ])),
                shortcut: None,
                scale: 0.3,
                post_relu: true,
            },
            Block::MaxPool2,
            Block::Residual {
                body: Box::new(Block::Conv(Conv2d::new(2, 3, 3, 2, 1, rng))),
                shortcut: Some(Conv2d::new(2, 3, 1, 2, 0, rng)),
                scale: 1.0,
                post_relu: false,
            },
        ])
    }

    #[test]
    fn block_tree_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = tiny_tree(&mut rng);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        // non-zero biases keep pre-activations off the ReLU kink
        net.visit_mut("", &mut |_, p| p.values_mut().iter_mut().for_each(|v| *v = u.sample(&mut rng)));
        let x = Array4::from_shape_fn((2, 3, 6, 6), |_| u.sample(&mut rng));
        let y = net.forward(&x);
        let g = Array4::from_shape_fn(y.dim(), |_| u.sample(&mut rng));
        let loss = |net: &Block<f64>, x: &Array4<f64>| -> f64 {
            net.forward(x).iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        let (y2, cache) = net.forward_train(&x);
        assert_eq!(y, y2);
        net.zero_grad();
        let dx = net.backward(cache, g.clone(), true).unwrap();

        let mut analytic = Vec::new();
        net.visit("", &mut |_, p| analytic.extend_from_slice(p.grads()));
        let h = 1e-6;
        let mut idx = 0;
        let n_params = analytic.len();
        while idx < n_params {
            let mut probe = net.clone();
            let mut k = 0;
            probe.visit_mut("", &mut |_, p| {
                if idx >= k && idx < k + p.len() {
                    p.values_mut()[idx - k] += h;
                }
                k += p.len();
            });
            let up = loss(&probe, &x);
            let mut k = 0;
            probe.visit_mut("", &mut |_, p| {
                if idx >= k && idx < k + p.len() {
                    p.values_mut()[idx - k] -= 2.0 * h;
                }
                k += p.len();
            });
            let dn = loss(&probe, &x);
            let num = (up - dn) / (2.0 * h);
            assert!((num - analytic[idx]).abs() < 1e-6, "param {idx}: {num} vs {}", analytic[idx]);
            idx += 1;
        }
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let up = loss(&net, &xp);
            xp.as_slice_mut().unwrap()[i] -= 2.0 * h;
            let dn = loss(&net, &xp);
            let num = (up - dn) / (2.0 * h);
            assert!((num - dx.as_slice().unwrap()[i]).abs() < 1e-6);
        }
    }
}
