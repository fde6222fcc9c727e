use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{join, relu, relu_backward, slice1, slice1_mut, slice2, slice2_mut, Mode, Scalar, TensorKind, TensorRef, Tensors};

/// Shared per-point affine map `y = x W + b` (a kernel-size-1 convolution
/// across the point axis).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `(in × out)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    /// Uniform `±1/√in` initialization for weights and bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || T::of(rng.gen_range(-bound..bound)));
        let bias = Array1::from_shape_simple_fn(outputs, || T::of(rng.gen_range(-bound..bound)));
        Self { weight, bias }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Dense<T>) -> Array2<T> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<T: Scalar> Tensors<T> for Dense<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, T>)) {
        f(TensorRef {
            name: join(prefix, "weight"),
            kind: TensorKind::Param,
            shape: self.weight.shape().to_vec(),
            data: slice2(&self.weight),
        });
        f(TensorRef {
            name: join(prefix, "bias"),
            kind: TensorKind::Param,
            shape: self.bias.shape().to_vec(),
            data: slice1(&self.bias),
        });
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut [T])) {
        f(&join(prefix, "weight"), TensorKind::Param, slice2_mut(&mut self.weight));
        f(&join(prefix, "bias"), TensorKind::Param, slice1_mut(&mut self.bias));
    }
}

/// Batch normalization over the point axis.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
    mode: Mode,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
    n: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array2<T>, mode: Mode) -> (Array2<T>, BnCache<T>) {
        let n = x.nrows();
        let eps = T::of(BN_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                let inv_n = T::one() / T::of(n as f64);
                let mean = x.sum_axis(Axis(0)) * inv_n;
                let centered = x - &mean;
                let var = (&centered * &centered).sum_axis(Axis(0)) * inv_n;
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = (x - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        let cache = BnCache {
            xhat,
            inv_std,
            mode,
            batch_mean: mean,
            batch_var: var,
            n,
        };
        (y, cache)
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &Array2<T>, grad: &mut BatchNorm<T>) -> Array2<T> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        match cache.mode {
            Mode::Eval => dxhat * &cache.inv_std,
            Mode::Train => {
                let n = T::of(cache.n as f64);
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let scale = &cache.inv_std / n;
                ((dxhat * n) - &sum_d - &(&cache.xhat * &sum_dx)) * &scale
            }
        }
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// averages (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let n = cache.n as f64;
        let unbias = T::of(if cache.n > 1 { n / (n - 1.0) } else { 1.0 });
        self.running_mean = &self.running_mean * keep + &(&cache.batch_mean * m);
        self.running_var = &self.running_var * keep + &(&cache.batch_var * (m * unbias));
    }
}

impl<T: Scalar> Tensors<T> for BatchNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, T>)) {
        for (name, kind, a) in [
            ("gamma", TensorKind::Param, &self.gamma),
            ("beta", TensorKind::Param, &self.beta),
            ("running_mean", TensorKind::Buffer, &self.running_mean),
            ("running_var", TensorKind::Buffer, &self.running_var),
        ] {
            f(TensorRef {
                name: join(prefix, name),
                kind,
                shape: a.shape().to_vec(),
                data: slice1(a),
            });
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut [T])) {
        f(&join(prefix, "gamma"), TensorKind::Param, slice1_mut(&mut self.gamma));
        f(&join(prefix, "beta"), TensorKind::Param, slice1_mut(&mut self.beta));
        f(&join(prefix, "running_mean"), TensorKind::Buffer, slice1_mut(&mut self.running_mean));
        f(&join(prefix, "running_var"), TensorKind::Buffer, slice1_mut(&mut self.running_var));
    }
}

/// `Dense → [BatchNorm] → [ReLU]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock<T> {
    pub dense: Dense<T>,
    pub norm: Option<BatchNorm<T>>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    input: Array2<T>,
    bn: Option<BnCache<T>>,
    output: Array2<T>,
}

impl<T> BlockCache<T> {
    pub fn output(&self) -> &Array2<T> {
        &self.output
    }
}

impl<T: Scalar> DenseBlock<T> {
    /// Hidden stage: affine map, batch normalization and ReLU.
    pub fn hidden<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            dense: Dense::init(inputs, outputs, rng),
            norm: Some(BatchNorm::new(outputs)),
            relu: true,
        }
    }

    /// Hidden stage without normalization (used where the batch is a single
    /// vector).
    pub fn hidden_plain<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            dense: Dense::init(inputs, outputs, rng),
            norm: None,
            relu: true,
        }
    }

    /// Final stage: affine map only.
    pub fn linear<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            dense: Dense::init(inputs, outputs, rng),
            norm: None,
            relu: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dense: Dense::zeros(self.dense.inputs(), self.dense.outputs()),
            norm: self.norm.as_ref().map(|n| BatchNorm::zeros(n.gamma.len())),
            relu: self.relu,
        }
    }

    pub fn forward(&self, x: &Array2<T>, mode: Mode) -> BlockCache<T> {
        let mut z = self.dense.forward(x);
        let mut bn = None;
        if let Some(norm) = &self.norm {
            let (y, c) = norm.forward(&z, mode);
            z = y;
            bn = Some(c);
        }
        if self.relu {
            z = relu(&z);
        }
        BlockCache {
            input: x.clone(),
            bn,
            output: z,
        }
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &Array2<T>, grad: &mut DenseBlock<T>) -> Array2<T> {
        let mut d = if self.relu {
            relu_backward(&cache.output, dy)
        } else {
            dy.clone()
        };
        if let (Some(norm), Some(c), Some(g)) = (&self.norm, &cache.bn, grad.norm.as_mut()) {
            d = norm.backward(c, &d, g);
        }
        self.dense.backward(&cache.input, &d, &mut grad.dense)
    }

    pub fn update_running(&mut self, cache: &BlockCache<T>) {
        if let (Some(norm), Some(c)) = (self.norm.as_mut(), &cache.bn) {
            norm.update_running(c);
        }
    }
}

impl<T: Scalar> Tensors<T> for DenseBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, T>)) {
        self.dense.visit(&join(prefix, "dense"), f);
        if let Some(n) = &self.norm {
            n.visit(&join(prefix, "norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut [T])) {
        self.dense.visit_mut(&join(prefix, "dense"), f);
        if let Some(n) = self.norm.as_mut() {
            n.visit_mut(&join(prefix, "norm"), f);
        }
    }
}

impl<T: Scalar> Tensors<T> for Vec<DenseBlock<T>> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, T>)) {
        for (i, b) in self.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut [T])) {
        for (i, b) in self.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
