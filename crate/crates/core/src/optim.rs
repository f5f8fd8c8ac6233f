//! NAdam, reduce-on-plateau learning-rate schedule and early stopping.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{DiffArray, Real};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Module, ParamKind};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// First and second moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Nesterov-accelerated Adam with bias correction and a constant momentum
/// coefficient:
///
/// ```text
/// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
/// m_hat = m / (1 - b1^t)         v_hat = v / (1 - b2^t)
/// p -= lr (b1 m_hat + (1 - b1) g / (1 - b1^t)) / (sqrt(v_hat) + eps)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct NAdam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Default for NAdam<T> {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

impl<T: Real> NAdam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<T>> {
        &self.moments
    }

    /// Restores a saved state.
    pub fn with_state(mut self, step: u64, moments: BTreeMap<String, Moments<T>>) -> Self {
        self.step = step;
        self.moments = moments;
        self
    }

    /// One update over named parameter slices. All gradients are checked
    /// before anything changes, so a failed step leaves parameters and state
    /// untouched.
    pub fn step(&mut self, params: &mut [(&str, &mut [T], &[T])]) -> Result<()> {
        for (name, p, g) in params.iter() {
            if p.len() != g.len() {
                return Err(shape_err!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    p.len()
                ));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerics(format!("non-finite gradient in {name} at {i}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let c = |v: f64| T::from_f64(v);
        let (b1t, b2t, one_b1, one_b2) = (c(b1), c(b2), c(1.0 - b1), c(1.0 - b2));
        let (inv_bc1, inv_bc2) = (c(1.0 / bc1), c(1.0 / bc2));
        let (lr, eps) = (c(self.lr), c(self.epsilon));
        for (name, p, g) in params.iter_mut() {
            let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); p.len()],
                v: vec![T::zero(); p.len()],
            });
            if st.m.len() != p.len() {
                return Err(shape_err!("optimizer state for {name} has the wrong size"));
            }
            for i in 0..p.len() {
                let gi = g[i];
                let m = b1t * st.m[i] + one_b1 * gi;
                let v = b2t * st.v[i] + one_b2 * gi * gi;
                st.m[i] = m;
                st.v[i] = v;
                let m_hat = m * inv_bc1;
                let v_hat = v * inv_bc2;
                let num = b1t * m_hat + one_b1 * gi * inv_bc1;
                p[i] = p[i] - lr * num / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Applies a step to every trainable array of `module`. Parameters
    /// without an entry in `grads` receive a zero gradient.
    pub fn step_module<M: Module<T>>(
        &mut self,
        module: &mut M,
        grads: &HashMap<String, Vec<T>>,
    ) -> Result<()> {
        let mut taken: Vec<(String, DiffArray<T>)> = Vec::new();
        module.visit_mut(&mut |n, a, kind| {
            if kind == ParamKind::Trainable {
                taken.push((n.to_string(), std::mem::replace(a, DiffArray::zeros(&[0]))));
            }
        });
        let zeros: Vec<Vec<T>> = taken
            .iter()
            .map(|(n, a)| if grads.contains_key(n) { Vec::new() } else { vec![T::zero(); a.numel()] })
            .collect();
        let result = {
            let mut slots: Vec<(&str, &mut [T], &[T])> = taken
                .iter_mut()
                .zip(&zeros)
                .map(|((n, a), z)| {
                    let g = grads.get(n.as_str()).map_or(z.as_slice(), Vec::as_slice);
                    (n.as_str(), a.data_mut(), g)
                })
                .collect();
            self.step(&mut slots)
        };
        let mut restored = taken.into_iter();
        module.visit_mut(&mut |_, a, kind| {
            if kind == ParamKind::Trainable {
                *a = restored.next().expect("same visit order").1;
            }
        });
        result
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// strict improvement of the monitored loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub initial_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    wait: usize,
    reductions: u32,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            initial_lr,
            factor,
            patience,
            min_delta: 0.0,
            best: f64::INFINITY,
            wait: 0,
            reductions: 0,
        }
    }

    /// Current rate, `initial_lr * factor^reductions`.
    pub fn lr(&self) -> f64 {
        self.initial_lr * self.factor.powi(self.reductions as i32)
    }

    pub fn reductions(&self) -> u32 {
        self.reductions
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn wait(&self) -> usize {
        self.wait
    }

    pub fn restore(&mut self, best: f64, wait: usize, reductions: u32) {
        self.best = best;
        self.wait = wait;
        self.reductions = reductions;
    }

    /// Records one epoch's loss and returns the learning rate to use next.
    pub fn epoch_end(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.reductions += 1;
                self.wait = 0;
            }
        }
        self.lr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement and
/// keeps a snapshot of the best state seen.
#[derive(Debug, Clone)]
pub struct EarlyStopper<S> {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
    snapshot: Option<S>,
}

impl<S> EarlyStopper<S> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_delta: 0.0,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
            snapshot: None,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn wait(&self) -> usize {
        self.wait
    }

    pub fn snapshot(&self) -> Option<&S> {
        self.snapshot.as_ref()
    }

    pub fn into_snapshot(self) -> Option<S> {
        self.snapshot
    }

    pub fn restore(&mut self, best: f64, best_epoch: Option<usize>, wait: usize, snapshot: Option<S>) {
        self.best = best;
        self.best_epoch = best_epoch;
        self.wait = wait;
        self.snapshot = snapshot;
    }

    /// Records the loss of `epoch` (1-based). `snapshot` is only called on
    /// improvement.
    pub fn check(&mut self, epoch: usize, loss: f64, snapshot: impl FnOnce() -> S) -> StopDecision {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            self.snapshot = Some(snapshot());
        } else {
            self.wait += 1;
        }
        if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
