//! Parameterized 1-D sequence layers and the residual-difference block.
//!
//! All sequence activations are `[batch, len, channels]`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchStats, DiffArray, Padding, Real, ReduceOp, Tape, Var};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Whether a named array is optimized or only carried along (running stats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Forward-pass context: the tape, the mode, and what the pass produced
/// besides activations (parameter bindings and batch-norm statistics).
pub struct Ctx<'t, T> {
    pub tape: &'t mut Tape<T>,
    pub mode: Mode,
    param_grads: bool,
    bound: Vec<(String, Var)>,
    batch_stats: HashMap<String, BatchStats<T>>,
}

impl<'t, T: Real> Ctx<'t, T> {
    /// Parameters take gradients in train mode only; see
    /// [`Ctx::with_param_grads`].
    pub fn new(tape: &'t mut Tape<T>, mode: Mode) -> Self {
        Self {
            tape,
            mode,
            param_grads: mode == Mode::Train,
            bound: Vec::new(),
            batch_stats: HashMap::new(),
        }
    }

    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.param_grads = on;
        self
    }

    pub fn bind(&mut self, name: &str, value: &DiffArray<T>) -> Var {
        let v = self.tape.leaf(value.clone(), self.param_grads);
        self.bound.push((name.to_string(), v));
        v
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn grads(&self) -> HashMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(n, v)| self.tape.grad(*v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }

    pub fn take_batch_stats(&mut self) -> HashMap<String, BatchStats<T>> {
        std::mem::take(&mut self.batch_stats)
    }
}

/// Something with named parameters.
pub trait Module<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&str, &DiffArray<T>, ParamKind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DiffArray<T>, ParamKind));
}

pub(crate) fn he_normal<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> DiffArray<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
    DiffArray::new(shape.to_vec(), data).expect("consistent shape")
}

#[derive(Debug, Clone)]
pub struct Conv1dLayer<T> {
    pub name: String,
    /// `[out_channels, in_channels, kernel]`
    pub weight: DiffArray<T>,
    pub bias: DiffArray<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Real> Conv1dLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        Self {
            name: name.to_string(),
            weight: he_normal(&[out_ch, in_ch, kernel], in_ch * kernel, rng),
            bias: DiffArray::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Output length for an input of `len` steps.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        match self.padding {
            Padding::Same => Some(len.div_ceil(self.stride)),
            Padding::Valid => (len >= self.kernel()).then(|| (len - self.kernel()) / self.stride + 1),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.bind(&format!("{}.weight", self.name), &self.weight);
        let b = ctx.bind(&format!("{}.bias", self.name), &self.bias);
        ctx.tape.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

impl<T: Real> Module<T> for Conv1dLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &DiffArray<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DiffArray<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &mut self.bias, ParamKind::Trainable);
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm1dLayer<T> {
    pub name: String,
    pub gamma: DiffArray<T>,
    pub beta: DiffArray<T>,
    pub running_mean: DiffArray<T>,
    pub running_var: DiffArray<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNorm1dLayer<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: DiffArray::full(&[channels], T::one()),
            beta: DiffArray::zeros(&[channels]),
            running_mean: DiffArray::zeros(&[channels]),
            running_var: DiffArray::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// Train mode normalizes with batch statistics (population variance) and
    /// queues them for [`BatchNorm1dLayer::update_running`]; eval mode uses the
    /// running statistics only.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.bind(&format!("{}.gamma", self.name), &self.gamma);
        let b = ctx.bind(&format!("{}.beta", self.name), &self.beta);
        let eps = T::from_f64(self.epsilon);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, g, b, eps, None)?;
                if let Some(s) = stats {
                    ctx.batch_stats.insert(self.name.clone(), s);
                }
                Ok(y)
            }
            Mode::Eval => {
                let running = Some((self.running_mean.data(), self.running_var.data()));
                Ok(ctx.tape.batch_norm(x, g, b, eps, running)?.0)
            }
        }
    }

    /// Exponential moving average of the batch statistics.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (keep * *r + m * b).max(T::zero());
        }
    }
}

impl<T: Real> Module<T> for BatchNorm1dLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &DiffArray<T>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &self.gamma, ParamKind::Trainable);
        f(&format!("{}.beta", self.name), &self.beta, ParamKind::Trainable);
        f(&format!("{}.running_mean", self.name), &self.running_mean, ParamKind::Buffer);
        f(&format!("{}.running_var", self.name), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DiffArray<T>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma, ParamKind::Trainable);
        f(&format!("{}.beta", self.name), &mut self.beta, ParamKind::Trainable);
        f(&format!("{}.running_mean", self.name), &mut self.running_mean, ParamKind::Buffer);
        f(&format!("{}.running_var", self.name), &mut self.running_var, ParamKind::Buffer);
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer<T> {
    pub name: String,
    /// `[out, in]`
    pub weight: DiffArray<T>,
    pub bias: DiffArray<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn new<R: Rng>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            name: name.to_string(),
            weight: he_normal(&[fan_out, fan_in], fan_in, rng),
            bias: DiffArray::zeros(&[fan_out]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.bind(&format!("{}.weight", self.name), &self.weight);
        let b = ctx.bind(&format!("{}.bias", self.name), &self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

impl<T: Real> Module<T> for DenseLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &DiffArray<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DiffArray<T>, ParamKind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Trainable);
        f(&format!("{}.bias", self.name), &mut self.bias, ParamKind::Trainable);
    }
}

/// Convolutional block that emits `C - P(x)`: the projection `C` learned by
/// `conv -> BN -> ReLU -> conv -> BN`, minus the input aligned by `P`
/// (a 1x1 convolution when channels or length change, identity otherwise).
#[derive(Debug, Clone)]
pub struct ResidualDifferenceBlock<T> {
    pub name: String,
    pub conv1: Conv1dLayer<T>,
    pub bn1: BatchNorm1dLayer<T>,
    pub conv2: Conv1dLayer<T>,
    pub bn2: BatchNorm1dLayer<T>,
    pub input_proj: Option<Conv1dLayer<T>>,
    pub post_relu: bool,
}

impl<T: Real> ResidualDifferenceBlock<T> {
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        post_relu: bool,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv1dLayer::new(&format!("{name}.conv1"), in_ch, out_ch, kernel, stride, Padding::Same, rng);
        let conv2 = Conv1dLayer::new(&format!("{name}.conv2"), out_ch, out_ch, kernel, 1, Padding::Same, rng);
        let input_proj = (in_ch != out_ch || stride != 1).then(|| {
            Conv1dLayer::new(&format!("{name}.proj"), in_ch, out_ch, 1, stride, Padding::Same, rng)
        });
        Self {
            name: name.to_string(),
            conv1,
            bn1: BatchNorm1dLayer::new(&format!("{name}.bn1"), out_ch),
            conv2,
            bn2: BatchNorm1dLayer::new(&format!("{name}.bn2"), out_ch),
            input_proj,
            post_relu,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    /// The projection `C`.
    pub fn conv_path(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        self.bn2.forward(ctx, h)
    }

    /// `P(x)`.
    pub fn project(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match &self.input_proj {
            Some(p) => p.forward(ctx, x),
            None => Ok(x),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = self.conv_path(ctx, x)?;
        let p = self.project(ctx, x)?;
        if ctx.tape.shape(c) != ctx.tape.shape(p) {
            return Err(shape_err!(
                "{}: projection {:?} does not align with input path {:?}",
                self.name,
                ctx.tape.shape(c),
                ctx.tape.shape(p)
            ));
        }
        let y = ctx.tape.sub(c, p)?;
        if self.post_relu {
            ctx.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn update_running(&mut self, stats: &HashMap<String, BatchStats<T>>) {
        for bn in [&mut self.bn1, &mut self.bn2] {
            if let Some(s) = stats.get(&bn.name) {
                bn.update_running(s);
            }
        }
    }
}

impl<T: Real> Module<T> for ResidualDifferenceBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &DiffArray<T>, ParamKind)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some(p) = &self.input_proj {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DiffArray<T>, ParamKind)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some(p) = &mut self.input_proj {
            p.visit_mut(f);
        }
    }
}

pub fn maxpool1d<T: Real>(tape: &mut Tape<T>, x: Var, window: usize, stride: usize) -> Result<Var> {
    tape.maxpool1d(x, window, stride)
}

/// `[batch, len, ch] -> [batch, 2ch]`: per-channel global max followed by
/// per-channel global mean.
pub fn global_pool_head<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    if tape.shape(x).len() != 3 {
        return Err(shape_err!("global pooling expects [batch, len, ch], got {:?}", tape.shape(x)));
    }
    let mx = tape.reduce(ReduceOp::Max, x, Some(1))?;
    let mean = tape.reduce(ReduceOp::Mean, x, Some(1))?;
    tape.concat(&[mx, mean])
}

pub fn softmax<T: Real>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    tape.softmax(logits)
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every trainable
/// parameter coordinate of `module`, where `loss` runs a forward pass in
/// `mode` and returns a scalar. Numeric gradients are central differences on
/// perturbed copies of the module.
pub fn module_grad_check<M, F>(module: &M, loss: F, mode: Mode, h: f64) -> Result<f64>
where
    M: Module<f64> + Clone,
    F: Fn(&M, &mut Ctx<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, mode).with_param_grads(true);
    let out = loss(module, &mut ctx)?;
    ctx.tape.backward(out)?;
    let grads = ctx.grads();

    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, mode).with_param_grads(false);
        let out = loss(m, &mut ctx)?;
        let v = ctx.tape.value(out).item()?;
        if !v.is_finite() {
            return Err(crate::error::domain_err!("loss is not finite"));
        }
        Ok(v)
    };

    let mut names = Vec::new();
    module.visit(&mut |name, arr, kind| {
        if kind == ParamKind::Trainable {
            names.push((name.to_string(), arr.numel()));
        }
    });
    let mut worst = 0.0f64;
    for (name, numel) in names {
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| vec![0.0; numel]);
        for i in 0..numel {
            let shifted = |delta: f64| {
                let mut m = module.clone();
                m.visit_mut(&mut |n, arr, _| {
                    if n == name {
                        arr.data_mut()[i] += delta;
                    }
                });
                m
            };
            let numeric = (eval(&shifted(h))? - eval(&shifted(-h))?) / (2.0 * h);
            worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::error::Error;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> DiffArray<f64> {
        let n: usize = shape.iter().product();
        DiffArray::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv(weight: &[f64], shape: [usize; 3], bias: &[f64], stride: usize, padding: Padding) -> Conv1dLayer<f64> {
        Conv1dLayer {
            name: "c".into(),
            weight: DiffArray::from_f64(&shape, weight).unwrap(),
            bias: DiffArray::from_f64(&[shape[0]], bias).unwrap(),
            stride,
            padding,
        }
    }

    fn run<F>(f: F) -> Vec<f64>
    where
        F: FnOnce(&mut Ctx<f64>) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let y = f(&mut ctx).unwrap();
        ctx.tape.value(y).data().to_vec()
    }

    #[test]
    fn conv_sliding_window_sum() {
        // oracle: direct sums of adjacent pairs of [1,2,3,4]
        let x = [1.0, 2.0, 3.0, 4.0];
        let expected: Vec<f64> = x.windows(2).map(|w| w[0] + w[1]).collect();
        let layer = conv(&[1.0, 1.0], [1, 1, 2], &[0.0], 1, Padding::Valid);
        let out = run(|ctx| {
            let xv = ctx.tape.constant(DiffArray::from_f64(&[1, 4, 1], &x).unwrap());
            layer.forward(ctx, xv)
        });
        assert_eq!(out, expected);
        assert_eq!(out, vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn identity_and_constant_convs() {
        let x = [0.5, -1.0, 2.0, 3.0, 7.0, -2.0];
        let ident = conv(&[1.0], [1, 1, 1], &[0.0], 1, Padding::Same);
        let out = run(|ctx| {
            let xv = ctx.tape.constant(DiffArray::from_f64(&[1, 6, 1], &x).unwrap());
            ident.forward(ctx, xv)
        });
        assert_eq!(out, x.to_vec());
        let zero = conv(&[0.0; 6], [2, 1, 3], &[1.5, -2.0], 1, Padding::Same);
        let out = run(|ctx| {
            let xv = ctx.tape.constant(DiffArray::from_f64(&[1, 6, 1], &x).unwrap());
            zero.forward(ctx, xv)
        });
        assert_eq!(out.len(), 12);
        assert!(out.chunks(2).all(|c| c == [1.5, -2.0]));
    }

    #[test]
    fn same_padding_lengths_and_layout() {
        let mut r = rng(1);
        for (len, stride, kernel) in [(200, 1, 7), (100, 2, 3), (25, 2, 3), (7, 3, 4), (5, 1, 2)] {
            let layer = Conv1dLayer::<f64>::new("c", 2, 3, kernel, stride, Padding::Same, &mut r);
            let out = run(|ctx| {
                let xv = ctx.tape.constant(DiffArray::zeros(&[2, len, 2]));
                layer.forward(ctx, xv)
            });
            assert_eq!(out.len(), 2 * len.div_ceil(stride) * 3);
            assert_eq!(layer.out_len(len), Some(len.div_ceil(stride)));
        }
        // kernel 2 'same' on [1,2,3]: one zero on the right -> [1+2, 2+3, 3+0]
        let pair = conv(&[1.0, 1.0], [1, 1, 2], &[0.0], 1, Padding::Same);
        let out = run(|ctx| {
            let xv = ctx.tape.constant(DiffArray::from_f64(&[1, 3, 1], &[1.0, 2.0, 3.0]).unwrap());
            pair.forward(ctx, xv)
        });
        assert_eq!(out, vec![3.0, 5.0, 3.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let layer = Conv1dLayer::<f64>::new("c", 3, 2, 3, 1, Padding::Same, &mut rng(0));
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.constant(DiffArray::zeros(&[1, 8, 2]));
        assert!(matches!(layer.forward(&mut ctx, xv), Err(Error::Shape(_))));
        let short = ctx.tape.constant(DiffArray::zeros(&[1, 2, 3]));
        let valid = Conv1dLayer::<f64>::new("v", 3, 2, 3, 1, Padding::Valid, &mut rng(0));
        assert!(matches!(valid.forward(&mut ctx, short), Err(Error::Shape(_))));
    }

    #[test]
    fn batchnorm_examples() {
        let mut bn = BatchNorm1dLayer::<f64>::new("bn", 1);
        bn.epsilon = 0.0;
        let out = {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Mode::Train);
            let xv = ctx.tape.constant(DiffArray::from_f64(&[2, 1, 1], &[1.0, 3.0]).unwrap());
            let y = bn.forward(&mut ctx, xv).unwrap();
            ctx.tape.value(y).data().to_vec()
        };
        assert_eq!(out, vec![-1.0, 1.0]);

        let mut bn = BatchNorm1dLayer::<f64>::new("bn", 1);
        bn.beta = DiffArray::from_vec(vec![0.25]);
        let out = {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Mode::Train);
            let xv = ctx.tape.constant(DiffArray::full(&[3, 2, 1], 4.0));
            let y = bn.forward(&mut ctx, xv).unwrap();
            ctx.tape.value(y).data().to_vec()
        };
        assert!(out.iter().all(|&v| v == 0.25));

        bn.gamma = DiffArray::from_vec(vec![0.0]);
        let out = {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Mode::Train);
            let xv = ctx.tape.constant(DiffArray::from_f64(&[2, 2, 1], &[1.0, -7.0, 3.0, 9.0]).unwrap());
            let y = bn.forward(&mut ctx, xv).unwrap();
            ctx.tape.value(y).data().to_vec()
        };
        assert!(out.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batchnorm_single_element_is_domain_error() {
        let bn = BatchNorm1dLayer::<f64>::new("bn", 2);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Mode::Train);
        let xv = ctx.tape.constant(DiffArray::zeros(&[1, 1, 2]));
        assert!(matches!(bn.forward(&mut ctx, xv), Err(Error::Domain(_))));
    }

    #[test]
    fn batchnorm_running_stats_and_eval_mode() {
        let mut bn = BatchNorm1dLayer::<f64>::new("bn", 1);
        let stats = {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Mode::Train);
            let xv = ctx.tape.constant(DiffArray::from_f64(&[4, 1, 1], &[1.0, 3.0, 5.0, 7.0]).unwrap());
            bn.forward(&mut ctx, xv).unwrap();
            ctx.take_batch_stats()
        };
        bn.update_running(&stats["bn"]);
        // mean 4, population variance 5
        assert!((bn.running_mean.data()[0] - 0.4).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.5)).abs() < 1e-12);

        let out = {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Mode::Eval);
            let xv = ctx.tape.constant(DiffArray::from_f64(&[1, 1, 1], &[2.0]).unwrap());
            let y = bn.forward(&mut ctx, xv).unwrap();
            assert!(ctx.take_batch_stats().is_empty());
            ctx.tape.value(y).data()[0]
        };
        assert!((out - (2.0 - 0.4) / (1.4f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let bn = BatchNorm1dLayer::<f32>::new("bn", 3);
            let data: Vec<f32> = (0..8 * 5 * 3).map(|_| r.random_range(-3.0f32..5.0)).collect();
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Mode::Train);
            let xv = ctx.tape.constant(DiffArray::new(vec![8, 5, 3], data).unwrap());
            let y = bn.forward(&mut ctx, xv).unwrap();
            let v = ctx.tape.value(y).data();
            for c in 0..3 {
                let col: Vec<f64> = v.iter().skip(c).step_by(3).map(|&x| x as f64).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
                assert!(mean.abs() <= 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() <= 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn maxpool_examples() {
        let pool = |x: &[f64], w, s| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(DiffArray::from_f64(&[1, x.len(), 1], x).unwrap());
            maxpool1d(&mut tape, xv, w, s).map(|y| tape.value(y).data().to_vec())
        };
        assert_eq!(pool(&[1.0, 3.0, 2.0, 5.0], 2, 2).unwrap(), vec![3.0, 5.0]);
        assert_eq!(pool(&[1.0, 3.0, 9.0, 5.0], 4, 1).unwrap(), vec![9.0]);
        assert_eq!(pool(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap(), vec![2.0, 4.0]);
        assert_eq!(pool(&[1.0, 2.0, 3.0, 4.0, 8.0], 2, 2).unwrap(), vec![2.0, 4.0]);
        assert!(matches!(pool(&[1.0], 2, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_outputs_are_inputs() {
        let mut r = rng(4);
        let x = random(&[3, 11, 2], &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = maxpool1d(&mut tape, xv, 3, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|v| x.data().contains(v)));
    }

    #[test]
    fn global_pool_examples() {
        let head = |x: &[f64], shape: [usize; 3]| {
            let mut tape = Tape::new();
            let xv = tape.constant(DiffArray::from_f64(&shape, x).unwrap());
            let y = global_pool_head(&mut tape, xv).unwrap();
            (tape.value(y).shape().to_vec(), tape.value(y).data().to_vec())
        };
        assert_eq!(head(&[1.0, 2.0, 3.0], [1, 3, 1]), (vec![1, 2], vec![3.0, 2.0]));
        assert_eq!(head(&[2.5, 2.5], [1, 2, 1]).1, vec![2.5, 2.5]);
        // channels [0,4] and [2,2], stored channels-last
        assert_eq!(head(&[0.0, 2.0, 4.0, 2.0], [1, 2, 2]).1, vec![4.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        let sm = |l: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(DiffArray::from_f64(&[1, 2], l).unwrap());
            let p = softmax(&mut tape, v).unwrap();
            tape.value(p).data().to_vec()
        };
        assert_eq!(sm(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = sm(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert_eq!(sm(&[0.3, -1.2]), sm(&[100.3, 98.8]));
    }

    #[test]
    fn softmax_rows_sum_to_one_in_single_precision() {
        let mut r = rng(2);
        let logits: Vec<f32> = (0..2000).map(|_| r.random_range(-50.0f32..50.0)).collect();
        let mut tape = Tape::new();
        let v = tape.constant(DiffArray::new(vec![1000, 2], logits).unwrap());
        let p = softmax(&mut tape, v).unwrap();
        for row in tape.value(p).data().chunks(2) {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!(((row[0] + row[1]) as f64 - 1.0).abs() <= 1e-6);
        }
    }

    fn zeroed_block(ch: usize) -> ResidualDifferenceBlock<f64> {
        let mut b = ResidualDifferenceBlock::new("b", ch, ch, 3, 1, false, &mut rng(0));
        b.visit_mut(&mut |name, arr, _| {
            if !name.ends_with("running_var") {
                arr.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        b
    }

    #[test]
    fn zero_block_outputs_negated_input() {
        let block = zeroed_block(2);
        assert!(block.input_proj.is_none());
        let x = random(&[2, 6, 2], &mut rng(8));
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, mode);
            let xv = ctx.tape.constant(x.clone());
            let y = block.forward(&mut ctx, xv).unwrap();
            let neg: Vec<f64> = x.data().iter().map(|v| -v).collect();
            assert_eq!(ctx.tape.value(y).data(), &neg[..]);
        }
    }

    #[test]
    fn identity_block_outputs_zero() {
        let mut block = zeroed_block(2);
        for conv in [&mut block.conv1, &mut block.conv2] {
            let w = conv.weight.data_mut();
            // [out, in, k]: centre tap of the diagonal
            w[1] = 1.0;
            w[6 + 3 + 1] = 1.0;
        }
        for bn in [&mut block.bn1, &mut block.bn2] {
            bn.gamma = DiffArray::full(&[2], 1.0);
            bn.epsilon = 0.0;
        }
        let x = DiffArray::new(vec![1, 5, 2], (0..10).map(|i| i as f64 * 0.5).collect()).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.constant(x);
        let y = block.forward(&mut ctx, xv).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_is_literal_difference_of_paths() {
        let mut r = rng(12);
        for (in_ch, out_ch, stride) in [(2, 2, 1), (2, 4, 1), (3, 3, 2), (2, 3, 2)] {
            let block = ResidualDifferenceBlock::<f64>::new("b", in_ch, out_ch, 3, stride, false, &mut r);
            let x = random(&[2, 9, in_ch], &mut r);
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Mode::Train);
            let xv = ctx.tape.constant(x);
            let y = block.forward(&mut ctx, xv).unwrap();
            let c = block.conv_path(&mut ctx, xv).unwrap();
            let p = block.project(&mut ctx, xv).unwrap();
            let d = ctx.tape.sub(c, p).unwrap();
            assert_eq!(ctx.tape.value(y), ctx.tape.value(d));
            assert_eq!(ctx.tape.shape(y), &[2, 9usize.div_ceil(stride), out_ch]);
        }
    }

    /// sum((y * w)^2) + sum(y * w) with a fixed, non-symmetric weighting
    fn objective(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
        let n = tape.value(y).numel();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let wv = tape.constant(DiffArray::new(tape.shape(y).to_vec(), w).unwrap());
        let p = tape.mul(y, wv)?;
        let sq = tape.mul(p, p)?;
        let a = tape.sum(sq)?;
        let b = tape.sum(p)?;
        tape.add(a, b)
    }

    /// Input and parameter gradients of every layer against central
    /// differences, double precision, 100 seeds, inputs of at most 64 values.
    #[test]
    fn layer_gradients_over_many_seeds() {
        let mut redraws = 0;
        for seed in 0..100u64 {
            let mut r = rng(1000 + seed);
            let mut x = random(&[2, 8, 3], &mut r);

            let conv = Conv1dLayer::<f64>::new("c", 3, 2, 3, 2, Padding::Same, &mut r);
            let bn = BatchNorm1dLayer::<f64> {
                gamma: random(&[3], &mut r),
                beta: random(&[3], &mut r),
                running_mean: random(&[3], &mut r),
                running_var: DiffArray::full(&[3], 0.7),
                ..BatchNorm1dLayer::new("bn", 3)
            };
            let dense = DenseLayer::<f64>::new("d", 6, 2, &mut r);
            let block = ResidualDifferenceBlock::<f64>::new("b", 3, 4, 3, 2, true, &mut r);
            let same_block = ResidualDifferenceBlock::<f64>::new("s", 3, 3, 3, 1, false, &mut r);

            let input_cases: Vec<(&str, Mode, Box<dyn Fn(&mut Ctx<f64>, Var) -> Result<Var>>)> = vec![
                ("conv", Mode::Eval, Box::new(|ctx, v| conv.forward(ctx, v))),
                ("bn", Mode::Train, Box::new(|ctx, v| bn.forward(ctx, v))),
                ("bn", Mode::Eval, Box::new(|ctx, v| bn.forward(ctx, v))),
                ("maxpool", Mode::Eval, Box::new(|ctx, v| maxpool1d(ctx.tape, v, 3, 2))),
                ("global_pool", Mode::Eval, Box::new(|ctx, v| global_pool_head(ctx.tape, v))),
                ("pool_dense_softmax", Mode::Eval, Box::new(|ctx, v| {
                    let g = global_pool_head(ctx.tape, v)?;
                    let l = dense.forward(ctx, g)?;
                    softmax(ctx.tape, l)
                })),
                ("block", Mode::Train, Box::new(|ctx, v| block.forward(ctx, v))),
                ("block", Mode::Eval, Box::new(|ctx, v| block.forward(ctx, v))),
                ("identity_block", Mode::Train, Box::new(|ctx, v| same_block.forward(ctx, v))),
            ];
            // redraw inputs that put a ReLU or max within 1e-3 of its kink
            let margin = |x: &DiffArray<f64>| {
                input_cases
                    .iter()
                    .map(|(_, mode, f)| {
                        let mut tape = Tape::new();
                        let mut ctx = Ctx::new(&mut tape, *mode);
                        let xv = ctx.tape.constant(x.clone());
                        f(&mut ctx, xv).unwrap();
                        tape.kink_margin()
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            while margin(&x) < 1e-3 {
                x = random(&[2, 8, 3], &mut r);
                redraws += 1;
            }
            for (name, mode, f) in &input_cases {
                let err = finite_diff_check(
                    |tape, v| {
                        let mut ctx = Ctx::new(tape, *mode).with_param_grads(false);
                        let y = f(&mut ctx, v)?;
                        objective(ctx.tape, y)
                    },
                    &x,
                    1e-4,
                )
                .unwrap();
                assert!(err <= 1e-5, "{name} {mode:?} input grad, seed {seed}: {err}");
            }

            for mode in [Mode::Train, Mode::Eval] {
                let err = module_grad_check(&conv, |m, ctx| {
                    let xv = ctx.tape.constant(x.clone());
                    let y = m.forward(ctx, xv)?;
                    objective(ctx.tape, y)
                }, mode, 1e-4).unwrap();
                assert!(err <= 1e-5, "conv params {mode:?} seed {seed}: {err}");
                let err = module_grad_check(&bn, |m, ctx| {
                    let xv = ctx.tape.constant(x.clone());
                    let y = m.forward(ctx, xv)?;
                    objective(ctx.tape, y)
                }, mode, 1e-4).unwrap();
                assert!(err <= 1e-5, "bn params {mode:?} seed {seed}: {err}");
                let err = module_grad_check(&block, |m, ctx| {
                    let xv = ctx.tape.constant(x.clone());
                    let y = m.forward(ctx, xv)?;
                    objective(ctx.tape, y)
                }, mode, 1e-4).unwrap();
                assert!(err <= 1e-5, "block params {mode:?} seed {seed}: {err}");
            }
            let pooled = random(&[2, 6], &mut r);
            let err = module_grad_check(&dense, |m, ctx| {
                let xv = ctx.tape.constant(pooled.clone());
                let y = m.forward(ctx, xv)?;
                objective(ctx.tape, y)
            }, Mode::Eval, 1e-4).unwrap();
            assert!(err <= 1e-5, "dense params seed {seed}: {err}");
        }
        assert!(redraws < 50, "{redraws} redraws");
    }
}
