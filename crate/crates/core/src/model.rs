//! The full classifier: convolutional stem, a chain of residual-difference
//! blocks, global max/mean pooling and a dense two-way head.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, DiffArray, Padding, Real, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{
    global_pool_head, maxpool1d, BatchNorm1dLayer, Conv1dLayer, Ctx, DenseLayer, Mode, Module,
    ParamKind, ResidualDifferenceBlock,
};

use crate::dataio::standardize_sample;
pub use crate::dataio::{DETECTORS, SAMPLE_LEN};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_len: usize,
    pub input_channels: usize,
    pub stem: StemConfig,
    pub blocks: Vec<BlockConfig>,
    pub head_hidden: Option<usize>,
    pub num_classes: usize,
    pub post_block_relu: bool,
    /// Standardize each sample per detector before the network.
    pub standardize_input: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: SAMPLE_LEN,
            input_channels: DETECTORS,
            stem: StemConfig {
                channels: 32,
                kernel: 7,
                pool: 2,
            },
            blocks: vec![
                BlockConfig {
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                },
                BlockConfig {
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                },
                BlockConfig {
                    out_channels: 128,
                    kernel: 3,
                    stride: 2,
                },
            ],
            head_hidden: None,
            num_classes: NUM_CLASSES,
            post_block_relu: true,
            standardize_input: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The default topology at half width, sized so a full synthetic run
    /// fits in a few minutes on one core.
    pub fn desk() -> Self {
        Self::with_width(16)
    }

    /// Default topology with stem width `w` and blocks `w, 2w, 4w`.
    pub fn with_width(w: usize) -> Self {
        let mut c = Self::default();
        c.stem.channels = w;
        for (b, mult) in c.blocks.iter_mut().zip([1, 2, 4]) {
            b.out_channels = w * mult;
        }
        c
    }

    /// Checks the class count and walks the length chain, rejecting any
    /// stage whose input is shorter than its kernel or pooling window.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 || self.stem.channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stem.kernel == 0 || self.stem.pool == 0 {
            return bad("stem kernel and pool must be positive".into());
        }
        let mut len = self.input_len;
        if len < self.stem.kernel {
            return bad(format!("input length {} below stem kernel {}", len, self.stem.kernel));
        }
        if len < self.stem.pool {
            return bad(format!("input length {} below stem pool {}", len, self.stem.pool));
        }
        len = (len - self.stem.pool) / self.stem.pool + 1;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return bad(format!("block {i}: channels, kernel and stride must be positive"));
            }
            if len < b.kernel {
                return bad(format!("block {i}: length {len} below kernel {}", b.kernel));
            }
            len = len.div_ceil(b.stride);
        }
        if self.head_hidden == Some(0) {
            return bad("head_hidden must be positive when set".into());
        }
        Ok(())
    }

    /// Channels reaching the global pooling head.
    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem.channels, |b| b.out_channels)
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    pub stem_conv: Conv1dLayer<T>,
    pub stem_bn: BatchNorm1dLayer<T>,
    pub blocks: Vec<ResidualDifferenceBlock<T>>,
    pub hidden: Option<DenseLayer<T>>,
    pub head: DenseLayer<T>,
}

impl<T: Real> Model<T> {
    /// Builds the network with He-normal weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let stem_conv = Conv1dLayer::new(
            "stem.conv",
            config.input_channels,
            config.stem.channels,
            config.stem.kernel,
            1,
            Padding::Same,
            &mut rng,
        );
        let stem_bn = BatchNorm1dLayer::new("stem.bn", config.stem.channels);
        let mut ch = config.stem.channels;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, b) in config.blocks.iter().enumerate() {
            blocks.push(ResidualDifferenceBlock::new(
                &format!("block{i}"),
                ch,
                b.out_channels,
                b.kernel,
                b.stride,
                config.post_block_relu,
                &mut rng,
            ));
            ch = b.out_channels;
        }
        let mut features = 2 * ch;
        let hidden = config.head_hidden.map(|h| {
            let layer = DenseLayer::new("head.hidden", features, h, &mut rng);
            features = h;
            layer
        });
        let head = DenseLayer::new("head.out", features, config.num_classes, &mut rng);
        Ok(Self {
            config,
            stem_conv,
            stem_bn,
            blocks,
            hidden,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Logits `[batch, 2]` for `x: [batch, len, detectors]`.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 3
            || shape[1] != self.config.input_len
            || shape[2] != self.config.input_channels
            || shape[0] == 0
        {
            return Err(shape_err!(
                "model expects [batch, {}, {}], got {:?}",
                self.config.input_len,
                self.config.input_channels,
                shape
            ));
        }
        let h = self.stem_conv.forward(ctx, x)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let mut h = maxpool1d(ctx.tape, h, self.config.stem.pool, self.config.stem.pool)?;
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
        }
        let mut f = global_pool_head(ctx.tape, h)?;
        if let Some(hidden) = &self.hidden {
            f = hidden.forward(ctx, f)?;
            f = ctx.tape.relu(f)?;
        }
        self.head.forward(ctx, f)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &HashMap<String, BatchStats<T>>) {
        if let Some(s) = stats.get(&self.stem_bn.name) {
            self.stem_bn.update_running(s);
        }
        for block in &mut self.blocks {
            block.update_running(stats);
        }
    }

    /// Eval-mode logits for a whole raw input array, processed in chunks.
    /// Applies input standardization when the config asks for it.
    pub fn logits(&self, x: &DiffArray<T>, chunk: usize) -> Result<Vec<[T; 2]>> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(shape_err!("expected [batch, len, detectors], got {:?}", shape));
        }
        let per = shape[1] * shape[2];
        let mut out = Vec::with_capacity(shape[0]);
        let mut tape = Tape::new();
        for rows in x.data().chunks(per * chunk.max(1)) {
            tape.clear();
            let n = rows.len() / per;
            let mut rows = rows.to_vec();
            if self.config.standardize_input {
                let mut buf: Vec<f32> = Vec::with_capacity(per);
                for row in rows.chunks_mut(per) {
                    buf.clear();
                    buf.extend(row.iter().map(|v| v.as_f64() as f32));
                    standardize_sample(&mut buf);
                    row.iter_mut().zip(&buf).for_each(|(r, &b)| *r = T::from_f64(b as f64));
                }
            }
            let arr = DiffArray::new(vec![n, shape[1], shape[2]], rows)?;
            let mut ctx = Ctx::new(&mut tape, Mode::Eval);
            let xv = ctx.tape.constant(arr);
            let l = self.forward(&mut ctx, xv)?;
            out.extend(tape.value(l).data().chunks(2).map(|r| [r[0], r[1]]));
        }
        Ok(out)
    }

    /// Eval-mode probability of the signal class for every row of `x`.
    pub fn predict_proba(&self, x: &DiffArray<T>) -> Result<Vec<f64>> {
        Ok(self
            .logits(x, 256)?
            .into_iter()
            .map(|[a, b]| signal_probability(a.as_f64(), b.as_f64()))
            .collect())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a, kind| {
            if kind == ParamKind::Trainable {
                n += a.numel();
            }
        });
        n
    }

    /// Every named array (trainable and buffers) in a fixed order.
    pub fn named_arrays(&self) -> Vec<(String, DiffArray<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, a, _| out.push((n.to_string(), a.clone())));
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut m = Model::<U>::new(self.config.clone()).expect("config already validated");
        let arrays: HashMap<String, DiffArray<T>> = self.named_arrays().into_iter().collect();
        m.visit_mut(&mut |n, a, _| *a = arrays[n].cast());
        m
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &DiffArray<T>, ParamKind)) {
        self.stem_conv.visit(f);
        self.stem_bn.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        if let Some(h) = &self.hidden {
            h.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DiffArray<T>, ParamKind)) {
        self.stem_conv.visit_mut(f);
        self.stem_bn.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        if let Some(h) = &mut self.hidden {
            h.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// softmax(logits)[1] computed stably.
pub fn signal_probability(background: f64, signal: f64) -> f64 {
    let m = background.max(signal);
    let (eb, es) = ((background - m).exp(), (signal - m).exp());
    es / (eb + es)
}

/// Argmax over the two logits; equal logits predict background.
pub fn predict_label(background: f64, signal: f64) -> u8 {
    u8::from(signal > background)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::layers::module_grad_check;

    pub(crate) fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            stem: StemConfig {
                channels: 3,
                kernel: 5,
                pool: 2,
            },
            blocks: vec![
                BlockConfig {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                },
                BlockConfig {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                },
            ],
            seed,
            ..ModelConfig::default()
        }
    }

    fn random_input(batch: usize, seed: u64) -> DiffArray<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * SAMPLE_LEN * DETECTORS;
        DiffArray::new(
            vec![batch, SAMPLE_LEN, DETECTORS],
            (0..n).map(|_| r.random_range(-2.0f32..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_forward_shape() {
        let model = Model::<f32>::new(ModelConfig::default()).unwrap();
        let x = random_input(8, 1);
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, mode);
            let xv = ctx.tape.constant(x.clone());
            let l = model.forward(&mut ctx, xv).unwrap();
            assert_eq!(tape.value(l).shape(), &[8, 2]);
            assert!(tape.value(l).is_finite());
        }
        let p = model.predict_proba(&x).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let model = Model::<f32>::new(small_config(3)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.constant(random_input(5, 2));
        let l = model.forward(&mut ctx, xv).unwrap();
        let p = ctx.tape.softmax(l).unwrap();
        for row in tape.value(p).data().chunks(2) {
            assert!(((row[0] + row[1]) as f64 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::new(ModelConfig { seed: 9, ..ModelConfig::default() }).unwrap();
        let b = Model::<f32>::new(ModelConfig { seed: 9, ..ModelConfig::default() }).unwrap();
        let c = Model::<f32>::new(ModelConfig { seed: 10, ..ModelConfig::default() }).unwrap();
        let bits = |m: &Model<f32>| {
            m.named_arrays()
                .into_iter()
                .flat_map(|(_, a)| a.into_data().into_iter().map(f32::to_bits))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn identical_rows_give_identical_logits_in_eval() {
        let model = Model::<f32>::new(small_config(4)).unwrap();
        let one = random_input(1, 7);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(one.data());
        }
        let x = DiffArray::new(vec![4, SAMPLE_LEN, DETECTORS], data).unwrap();
        let l = model.logits(&x, 4).unwrap();
        assert!(l.iter().all(|r| r[0].to_bits() == l[0][0].to_bits() && r[1].to_bits() == l[0][1].to_bits()));
        // eval forward is a pure function
        assert_eq!(
            model.logits(&x, 3).unwrap().iter().map(|r| r[0].to_bits()).collect::<Vec<_>>(),
            l.iter().map(|r| r[0].to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn width_presets() {
        assert_eq!(ModelConfig::with_width(32), ModelConfig::default());
        let desk = ModelConfig::desk();
        assert_eq!(desk.stem.channels, 16);
        assert_eq!(desk.blocks.iter().map(|b| b.out_channels).collect::<Vec<_>>(), [16, 32, 64]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = ModelConfig {
            num_classes: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::<f32>::new(c), Err(Error::Config(_))));
        let mut c = small_config(0);
        c.blocks.extend(std::iter::repeat_n(
            BlockConfig {
                out_channels: 4,
                kernel: 5,
                stride: 4,
            },
            4,
        ));
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small_config(0);
        c.input_len = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_shape_is_shape_error() {
        let model = Model::<f32>::new(small_config(0)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.constant(DiffArray::zeros(&[2, 100, 2]));
        assert!(matches!(model.forward(&mut ctx, xv), Err(Error::Shape(_))));
    }

    #[test]
    fn prediction_tie_breaks_to_background() {
        assert_eq!(predict_label(0.3, 0.3), 0);
        assert_eq!(predict_label(0.3, 0.31), 1);
        for shift in [-5.0, 0.0, 100.0] {
            assert_eq!(predict_label(1.0 + shift, 2.0 + shift), 1);
            assert_eq!(predict_label(2.0 + shift, 1.0 + shift), 0);
        }
        assert_eq!(signal_probability(0.0, 0.0), 0.5);
    }

    #[test]
    fn model_loss_gradients_match_central_differences() {
        let labels = [0usize, 1];
        let loss = |m: &Model<f64>, ctx: &mut Ctx<f64>, x: &DiffArray<f64>| {
            let xv = ctx.tape.constant(x.clone());
            let l = m.forward(ctx, xv)?;
            let p = ctx.tape.softmax(l)?;
            ctx.tape.cross_entropy(p, &labels)
        };
        let mut checked = 0;
        for seed in 0..12u64 {
            let model = Model::<f64>::new(small_config(seed)).unwrap();
            let x: DiffArray<f64> = random_input(2, 100 + seed).cast();
            for mode in [Mode::Train, Mode::Eval] {
                let mut tape = Tape::new();
                let mut ctx = Ctx::new(&mut tape, mode);
                loss(&model, &mut ctx, &x).unwrap();
                if tape.kink_margin() < 1e-4 {
                    continue;
                }
                let err = module_grad_check(&model, |m, ctx| loss(m, ctx, &x), mode, 1e-6).unwrap();
                assert!(err <= 1e-4, "seed {seed} {mode:?}: {err}");
                checked += 1;
            }
        }
        assert!(checked >= 4, "only {checked} draws cleared the kink margin");
    }
}
