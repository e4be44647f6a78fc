//! Small dense networks with hand-written backpropagation and Adam.
//!
//! Everything is plain `f64` on the heap; shapes stay in the tens of
//! units, so straightforward loops beat any BLAS detour at this scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// One dense layer, weights stored row-major: `w[o * n_in + i]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Feed-forward net: tanh after every layer except the last (linear output).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer gradient accumulators, same shapes as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Scratch space for one forward pass; `acts[0]` is the input, `acts[l+1]`
/// the post-activation output of layer `l` (post-tanh for hidden layers).
#[derive(Debug, Default, Clone)]
pub struct Cache {
    pub acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// Xavier-uniform hidden layers; the final layer starts at exactly zero
    /// so the initial output is the zero vector regardless of input.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Mlp {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let last = l == sizes.len() - 2;
            let lim = (6.0 / (n_in + n_out) as f64).sqrt();
            let w = (0..n_in * n_out)
                .map(|_| if last { 0.0 } else { rng.gen_range(-lim..lim) })
                .collect();
            layers.push(Layer {
                n_in,
                n_out,
                w,
                b: vec![0.0; n_out],
            });
        }
        Mlp { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w: self.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: self.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    /// Forward pass recording every activation for a later `backward`.
    pub fn forward_cached<'c>(&self, x: &[f64], cache: &'c mut Cache) -> &'c [f64] {
        assert_eq!(x.len(), self.n_in(), "input length mismatch");
        cache.acts.resize(self.layers.len() + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            let inp = &head[l];
            let out = &mut tail[0];
            out.clear();
            out.resize(layer.n_out, 0.0);
            let hidden = l + 1 < self.layers.len();
            for o in 0..layer.n_out {
                let mut s = layer.b[o];
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                for (wi, xi) in row.iter().zip(inp.iter()) {
                    s += wi * xi;
                }
                out[o] = if hidden { s.tanh() } else { s };
            }
        }
        &cache.acts[self.layers.len()]
    }

    /// Forward pass without keeping intermediates.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = Cache::default();
        self.forward_cached(x, &mut cache);
        cache.acts.pop().unwrap()
    }

    /// Accumulate dL/dparams into `grads` given dL/doutput for the sample
    /// whose activations sit in `cache`. Returns nothing; callers scale the
    /// accumulated sums by 1/batch before the optimizer step.
    pub fn backward(&self, cache: &Cache, dout: &[f64], grads: &mut MlpGrads) {
        assert_eq!(dout.len(), self.n_out(), "output gradient length mismatch");
        let mut delta = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let inp = &cache.acts[l];
            let gw = &mut grads.w[l];
            let gb = &mut grads.b[l];
            for o in 0..layer.n_out {
                let d = delta[o];
                gb[o] += d;
                let row = &mut gw[o * layer.n_in..(o + 1) * layer.n_in];
                for (g, xi) in row.iter_mut().zip(inp.iter()) {
                    *g += d * xi;
                }
            }
            if l > 0 {
                // Propagate through the weights, then through the tanh that
                // produced this layer's input.
                let mut next = vec![0.0; layer.n_in];
                for o in 0..layer.n_out {
                    let d = delta[o];
                    let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                    for (n, wi) in next.iter_mut().zip(row.iter()) {
                        *n += d * wi;
                    }
                }
                for (n, a) in next.iter_mut().zip(inp.iter()) {
                    *n *= 1.0 - a * a;
                }
                delta = next;
            }
        }
    }
}

/// Adam state for one `Mlp` plus an optional flat extra parameter block
/// (used for the policy's state-independent log-std vector).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    m_extra: Vec<f64>,
    v_extra: Vec<f64>,
}

impl Adam {
    pub fn new(net: &Mlp, n_extra: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m_w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            v_w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            m_b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            v_b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            m_extra: vec![0.0; n_extra],
            v_extra: vec![0.0; n_extra],
        }
    }

    fn update(lr: f64, b1: f64, b2: f64, eps: f64, t: u64, p: &mut f64, g: f64, m: &mut f64, v: &mut f64) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / (1.0 - b1.powi(t as i32));
        let vh = *v / (1.0 - b2.powi(t as i32));
        *p -= lr * mh / (vh.sqrt() + eps);
    }

    /// One optimizer step. `extra`/`extra_grads` may be empty slices when the
    /// state was built with `n_extra == 0`.
    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads, extra: &mut [f64], extra_grads: &[f64]) {
        assert_eq!(extra.len(), self.m_extra.len(), "extra block size mismatch");
        assert_eq!(extra_grads.len(), extra.len(), "extra gradient size mismatch");
        self.t += 1;
        let (lr, b1, b2, eps, t) = (self.lr, self.beta1, self.beta2, self.eps, self.t);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            for (i, p) in layer.w.iter_mut().enumerate() {
                Self::update(lr, b1, b2, eps, t, p, grads.w[l][i], &mut self.m_w[l][i], &mut self.v_w[l][i]);
            }
            for (i, p) in layer.b.iter_mut().enumerate() {
                Self::update(lr, b1, b2, eps, t, p, grads.b[l][i], &mut self.m_b[l][i], &mut self.v_b[l][i]);
            }
        }
        for (i, p) in extra.iter_mut().enumerate() {
            Self::update(lr, b1, b2, eps, t, p, extra_grads[i], &mut self.m_extra[i], &mut self.v_extra[i]);
        }
    }
}

impl MlpGrads {
    pub fn zero(&mut self) {
        for g in self.w.iter_mut().chain(self.b.iter_mut()) {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.w.iter_mut().chain(self.b.iter_mut()) {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}
