use crate::diffcore::{BatchStats, BnMode, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Per-feature batch-norm parameters and running statistics.
#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct Layer {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: Option<Norm>,
}

/// Fully connected network: hidden layers are affine, optional batch norm,
/// ReLU; the output layer is affine.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        batch_norm: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = input;
        for (k, &width) in hidden.iter().chain(std::iter::once(&output)).enumerate() {
            let is_hidden = k < hidden.len();
            let w = store.add(format!("{name}.l{k}.w"), Tensor::glorot(fan_in, width, rng));
            let b = store.add(format!("{name}.l{k}.b"), Tensor::zeros(&[width]));
            let norm = (is_hidden && batch_norm).then(|| Norm {
                gamma: store.add(format!("{name}.l{k}.bn_gamma"), Tensor::full(&[width], 1.0)),
                beta: store.add(format!("{name}.l{k}.bn_beta"), Tensor::zeros(&[width])),
                mean: vec![0.0; width],
                var: vec![1.0; width],
            });
            layers.push(Layer { w, b, norm });
            fan_in = width;
        }
        Self { name: name.to_string(), layers }
    }

    /// Records the network on `tape`; returns the output and the batch
    /// statistics of each normalised layer when `train` is set.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool) -> Result<(Var, Vec<BatchStats>)> {
        let mut h = x;
        let mut stats = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = tape.param(store, layer.w);
            let b = tape.param(store, layer.b);
            h = tape.affine(h, w, b)?;
            if k == last {
                break;
            }
            if let Some(n) = &layer.norm {
                let g = tape.param(store, n.gamma);
                let bt = tape.param(store, n.beta);
                let mode = if train {
                    BnMode::Train { eps: BN_EPS }
                } else {
                    BnMode::Eval { mean: n.mean.clone(), var: n.var.clone(), eps: BN_EPS }
                };
                let (y, s) = tape.batch_norm(h, g, bt, &mode)?;
                h = y;
                stats.extend(s);
            }
            h = tape.relu(h);
        }
        Ok((h, stats))
    }

    /// Folds training batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (n, s) in self.layers.iter_mut().filter_map(|l| l.norm.as_mut()).zip(stats) {
            for j in 0..n.mean.len() {
                n.mean[j] = (1.0 - BN_MOMENTUM) * n.mean[j] + BN_MOMENTUM * s.mean[j];
                n.var[j] = (1.0 - BN_MOMENTUM) * n.var[j] + BN_MOMENTUM * s.var[j];
            }
        }
    }

    pub fn norm_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.norm.is_some()).count()
    }

    /// Running statistics as named buffers.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            if let Some(n) = &l.norm {
                out.push((format!("{}.l{k}.bn_mean", self.name), Tensor::vector(n.mean.clone())));
                out.push((format!("{}.l{k}.bn_var", self.name), Tensor::vector(n.var.clone())));
            }
        }
        out
    }

    /// Restores running statistics; returns the number of buffers consumed.
    pub fn load_buffers(&mut self, buffers: &[(String, Tensor)]) -> usize {
        let mut used = 0;
        for (k, l) in self.layers.iter_mut().enumerate() {
            if let Some(n) = &mut l.norm {
                for (name, t) in buffers {
                    if *name == format!("{}.l{k}.bn_mean", self.name) && t.numel() == n.mean.len() {
                        n.mean.copy_from_slice(t.values());
                        used += 1;
                    } else if *name == format!("{}.l{k}.bn_var", self.name) && t.numel() == n.var.len() {
                        n.var.copy_from_slice(t.values());
                        used += 1;
                    }
                }
            }
        }
        used
    }
}
