//! Minimal dense and causal-convolution layers with hand-written backward
//! passes, enough for the actor and critic networks.
//!
//! Parameters live in a flat [`ParamStore`] of named tensors so optimizers,
//! Polyak averaging and checkpointing treat every network the same way.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

pub type Real = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<Real>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name, shape, data });
        self.params.len() - 1
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// `self ← tau * source + (1 - tau) * self`
    pub fn polyak_from(&mut self, source: &ParamStore, tau: Real) {
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            for (a, b) in t.data.iter_mut().zip(&s.data) {
                *a = tau * b + (1.0 - tau) * *a;
            }
        }
    }

    fn matrix(&self, idx: usize) -> ArrayView2<'_, Real> {
        let p = &self.params[idx];
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.data).expect("matrix shape")
    }

    fn tensor3(&self, idx: usize) -> ArrayView3<'_, Real> {
        let p = &self.params[idx];
        ArrayView3::from_shape((p.shape[0], p.shape[1], p.shape[2]), &p.data).expect("tensor shape")
    }
}

/// Gradient buffers matching a [`ParamStore`] entry for entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<Real>>);

impl Grads {
    fn add_matrix(&mut self, idx: usize, g: &Array2<Real>) {
        for (a, b) in self.0[idx].iter_mut().zip(g.iter()) {
            *a += b;
        }
    }
}

fn uniform_init<R: Rng + ?Sized>(rng: &mut R, n: usize, bound: Real) -> Vec<Real> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// `y = x W + b` with `W: (in, out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init_scale: Real,
        rng: &mut R,
    ) -> Self {
        let bound = init_scale * (6.0 / (inputs + outputs) as Real).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            vec![inputs, outputs],
            uniform_init(rng, inputs * outputs, bound),
        );
        let b = store.add(format!("{name}.bias"), vec![outputs], vec![0.0; outputs]);
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, Real>) -> Array2<Real> {
        let mut y = x.dot(&store.matrix(self.w));
        let b = ArrayView2::from_shape((1, self.outputs), &store.params[self.b].data).expect("bias");
        y += &b;
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView2<'_, Real>,
        dy: ArrayView2<'_, Real>,
        grads: &mut Grads,
    ) -> Array2<Real> {
        grads.add_matrix(self.w, &x.t().dot(&dy));
        let db = dy.sum_axis(Axis(0));
        for (a, b) in grads.0[self.b].iter_mut().zip(db.iter()) {
            *a += b;
        }
        dy.dot(&store.matrix(self.w).t())
    }
}

/// Causal dilated 1-D convolution over `(batch, channels, time)`; output
/// step `t` only sees inputs at `t, t - d, ..., t - (k - 1) d`.
#[derive(Clone, Copy, Debug)]
pub struct CausalConv1d {
    w: usize,
    b: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl CausalConv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let bound = (6.0 / (fan_in + out_channels) as Real).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel],
            uniform_init(rng, out_channels * fan_in, bound),
        );
        let b = store.add(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels]);
        Self {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            dilation,
        }
    }

    fn tap(&self, j: usize) -> usize {
        (self.kernel - 1 - j) * self.dilation
    }

    /// Weights as a `(in * kernel, out)` matrix matching [`Self::columns`].
    fn weight_matrix(&self, store: &ParamStore) -> Array2<Real> {
        let w = store.tensor3(self.w);
        let k = self.kernel;
        Array2::from_shape_fn((self.in_channels * k, self.out_channels), |(r, o)| w[[o, r / k, r % k]])
    }

    /// im2col: row `n * len + t` holds every tap feeding output step `t`.
    fn columns(&self, x: &ArrayView3<'_, Real>) -> Array2<Real> {
        let (batch, cin, len) = x.dim();
        let k = self.kernel;
        let mut cols = Array2::<Real>::zeros((batch * len, cin * k));
        for n in 0..batch {
            for i in 0..cin {
                let row = x.slice(s![n, i, ..]);
                for j in 0..k {
                    let back = self.tap(j);
                    for t in back..len {
                        cols[[n * len + t, i * k + j]] = row[t - back];
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView3<'_, Real>) -> Array3<Real> {
        let (batch, _, len) = x.dim();
        let mut y = self.columns(&x).dot(&self.weight_matrix(store));
        let bias = ArrayView2::from_shape((1, self.out_channels), &store.params[self.b].data).expect("bias");
        y += &bias;
        let y = y.into_shape_with_order((batch, len, self.out_channels)).expect("contiguous");
        y.permuted_axes([0, 2, 1]).as_standard_layout().into_owned()
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView3<'_, Real>,
        dy: ArrayView3<'_, Real>,
        grads: &mut Grads,
    ) -> Array3<Real> {
        let (batch, cin, len) = x.dim();
        let k = self.kernel;
        let dy2 = dy
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * len, self.out_channels))
            .expect("contiguous");
        let dwm = self.columns(&x).t().dot(&dy2);
        for (r, row) in dwm.outer_iter().enumerate() {
            for (o, g) in row.iter().enumerate() {
                grads.0[self.w][(o * cin + r / k) * k + r % k] += g;
            }
        }
        for (a, b) in grads.0[self.b].iter_mut().zip(dy2.sum_axis(Axis(0)).iter()) {
            *a += b;
        }
        let dcols = dy2.dot(&self.weight_matrix(store).t());
        let mut dx = Array3::<Real>::zeros(x.dim());
        for n in 0..batch {
            for i in 0..cin {
                for j in 0..k {
                    let back = self.tap(j);
                    for t in back..len {
                        dx[[n, i, t - back]] += dcols[[n * len + t, i * k + j]];
                    }
                }
            }
        }
        dx
    }
}

pub fn relu2(x: &Array2<Real>) -> Array2<Real> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu3(x: &Array3<Real>) -> Array3<Real> {
    x.mapv(|v| v.max(0.0))
}

/// Zero `dy` wherever the pre-activation was not positive.
pub fn relu_backward2(pre: &Array2<Real>, dy: &mut Array2<Real>) {
    dy.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
}

pub fn relu_backward3(pre: &Array3<Real>, dy: &mut Array3<Real>) {
    dy.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
}

/// Adam with bias correction over every tensor of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub step: u64,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: Real) -> Self {
        let zeros: Vec<Vec<Real>> = store.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, p) in store.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.0[k]);
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p.data[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Row-wise concatenation `[a | b]`.
pub fn concat_cols(a: ArrayView2<'_, Real>, b: ArrayView2<'_, Real>) -> Array2<Real> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(s![.., a.ncols()..]).assign(&b);
    out
}

pub fn column_sum(x: &Array2<Real>) -> Array1<Real> {
    x.sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss2(y: &Array2<Real>, probe: &Array2<Real>) -> f64 {
        y.iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let lin = Linear::new(&mut store, "l", 4, 3, 1.0, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 5) as Real * 0.3 - 0.5);
        let probe = Array2::from_shape_fn((5, 3), |(i, j)| ((i + 2 * j) % 3) as Real - 1.0);
        let mut grads = store.zero_grads();
        let dx = lin.backward(&store, x.view(), probe.view(), &mut grads);
        let h = 1e-2;
        for (pi, p) in store.params.clone().iter().enumerate() {
            for k in 0..p.data.len() {
                let mut sp = store.clone();
                sp.params[pi].data[k] += h;
                let mut sm = store.clone();
                sm.params[pi].data[k] -= h;
                let fd = (loss2(&lin.forward(&sp, x.view()), &probe)
                    - loss2(&lin.forward(&sm, x.view()), &probe))
                    / (2.0 * h as f64);
                assert!((fd - grads.0[pi][k] as f64).abs() < 1e-3, "{fd} vs {}", grads.0[pi][k]);
            }
        }
        for i in 0..5 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss2(&lin.forward(&store, xp.view()), &probe)
                    - loss2(&lin.forward(&store, xm.view()), &probe))
                    / (2.0 * h as f64);
                assert!((fd - dx[[i, j]] as f64).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn conv_is_causal_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let conv = CausalConv1d::new(&mut store, "c", 2, 3, 3, 2, &mut rng);
        let x = Array3::from_shape_fn((2, 2, 7), |(n, c, t)| ((n + 3 * c + 5 * t) % 7) as Real * 0.2 - 0.6);
        let y = conv.forward(&store, x.view());

        // perturbing a late input never changes earlier outputs
        let mut x2 = x.clone();
        x2[[0, 1, 5]] += 1.0;
        let y2 = conv.forward(&store, x2.view());
        for t in 0..5 {
            for o in 0..3 {
                assert_eq!(y[[0, o, t]], y2[[0, o, t]]);
            }
        }

        let probe = Array3::from_shape_fn(y.dim(), |(n, o, t)| ((n + o + t) % 3) as Real - 1.0);
        let f = |s: &ParamStore, x: &Array3<Real>| -> f64 {
            conv.forward(s, x.view())
                .iter()
                .zip(probe.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let mut grads = store.zero_grads();
        let dx = conv.backward(&store, x.view(), probe.view(), &mut grads);
        let h = 1e-2;
        for k in 0..store.params[0].data.len() {
            let mut sp = store.clone();
            sp.params[0].data[k] += h;
            let mut sm = store.clone();
            sm.params[0].data[k] -= h;
            let fd = (f(&sp, &x) - f(&sm, &x)) / (2.0 * h as f64);
            assert!((fd - grads.0[0][k] as f64).abs() < 1e-3);
        }
        for idx in [(0, 0, 0), (1, 1, 3), (0, 1, 6)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&store, &xp) - f(&store, &xm)) / (2.0 * h as f64);
            assert!((fd - dx[idx] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn polyak_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::default();
        Linear::new(&mut a, "l", 3, 3, 1.0, &mut rng);
        let mut b = ParamStore::default();
        Linear::new(&mut b, "l", 3, 3, 1.0, &mut rng);
        let mut t = b.clone();
        t.polyak_from(&a, 0.0);
        assert_eq!(t, b);
        t.polyak_from(&a, 1.0);
        assert_eq!(t, a);
    }
}
