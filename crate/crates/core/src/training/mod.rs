//! Optimisation: parameter initialisation, RMSProp, the training loop,
//! checkpoints and metric logs.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::Checkpoint;
pub use config::{MaskMode, TrainConfig};
pub use metrics::{read_metrics, MetricRow, MetricWriter, METRICS_HEADER};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{self, DatasetReader, LabeledScene, SpriteConfig};
use crate::error::{MonetError, Result};
use crate::model::{log_masks_from_masses, MaskSource, MonetArch};
use crate::nn::{Bound, ParamStore};
use crate::objective::LossBreakdown;
use crate::tensor::{Scalar, Tensor};

const PARAM_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Indexed collection of training scenes.
pub trait SceneSource: Sync {
    fn len(&self) -> usize;
    fn scene(&self, index: usize) -> Result<LabeledScene>;
    /// `(height, width)`
    fn size(&self) -> (usize, usize);
    fn mask_slots(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SceneSource for DatasetReader {
    fn len(&self) -> usize {
        DatasetReader::len(self)
    }

    fn scene(&self, index: usize) -> Result<LabeledScene> {
        self.read(index as u64)
    }

    fn size(&self) -> (usize, usize) {
        (self.header().height, self.header().width)
    }

    fn mask_slots(&self) -> usize {
        self.header().mask_slots
    }
}

impl SceneSource for [LabeledScene] {
    fn len(&self) -> usize {
        <[LabeledScene]>::len(self)
    }

    fn scene(&self, index: usize) -> Result<LabeledScene> {
        self.get(index).cloned().ok_or_else(|| MonetError::Argument(format!("scene {index} out of range")))
    }

    fn size(&self) -> (usize, usize) {
        self.first().map_or((0, 0), |s| (s.height, s.width))
    }

    fn mask_slots(&self) -> usize {
        self.iter().map(|s| s.mask_slots).max().unwrap_or(0)
    }
}

impl SceneSource for Vec<LabeledScene> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn scene(&self, index: usize) -> Result<LabeledScene> {
        self.as_slice().scene(index)
    }

    fn size(&self) -> (usize, usize) {
        self.as_slice().size()
    }

    fn mask_slots(&self) -> usize {
        self.as_slice().mask_slots()
    }
}

/// Sprite scenes generated on demand; scene `i` is `generate_scene(seed, start + i)`.
#[derive(Clone, Copy, Debug)]
pub struct ProceduralSource {
    pub seed: u64,
    pub start: u64,
    pub count: usize,
    pub config: SpriteConfig,
}

impl SceneSource for ProceduralSource {
    fn len(&self) -> usize {
        self.count
    }

    fn scene(&self, index: usize) -> Result<LabeledScene> {
        if index >= self.count {
            return Err(MonetError::Argument(format!("scene {index} out of range 0..{}", self.count)));
        }
        data::generate_scene(self.seed, self.start + index as u64, &self.config)
    }

    fn size(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn mask_slots(&self) -> usize {
        self.config.mask_slots()
    }
}

/// Truncated-normal weights and zero biases, a pure function of `seed`.
pub fn init_params<T: Scalar>(seed: u64, arch: &MonetArch) -> Result<ParamStore<T>> {
    Ok(ParamStore::init(&arch.param_specs()?, &mut stream_rng(seed, PARAM_STREAM)))
}

/// `v ← decay·v + (1 − decay)·g²; p ← p − lr·g/√(v + eps)`.
///
/// Every gradient is checked before anything is modified; a non-finite entry
/// aborts the step and names the tensor.
pub fn rmsprop_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut ParamStore<T>,
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| MonetError::Shape(format!("no gradient for {name}")))?;
        let v = state.get(name).ok_or_else(|| MonetError::Shape(format!("no optimiser state for {name}")))?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(MonetError::Shape(format!(
                "{name}: parameter {:?}, gradient {:?}, state {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if !g.is_finite() {
            return Err(MonetError::NonFinite { tensor: format!("gradient of {name}"), step: None });
        }
    }
    let (lr, decay, eps) = (T::of(lr), T::of(decay), T::of(eps));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked");
        let v = state.get_mut(name).expect("checked");
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = decay * *vv + (T::one() - decay) * gv * gv;
            let denom = (*vv + eps).sqrt();
            if denom > T::zero() {
                *pv = *pv - lr * gv / denom;
            }
        }
    }
    Ok(())
}

/// Result of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Index of the step just taken (0 for the first).
    pub step: u64,
    /// Loss before the update.
    pub loss: LossBreakdown,
    pub attention_calls: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub first_step: u64,
    pub final_step: u64,
    pub last_loss: Option<LossBreakdown>,
    pub attention_calls: u64,
    pub checkpoints: Vec<PathBuf>,
}

/// Mutable training state.
pub struct Trainer {
    pub arch: MonetArch,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub optimizer: ParamStore<f32>,
    pub step: u64,
    data_rng: ChaCha8Rng,
    model_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(arch: MonetArch, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(config.seed, &arch)?;
        let optimizer = ParamStore::zeros(&arch.param_specs()?);
        Ok(Self {
            data_rng: stream_rng(config.seed, DATA_STREAM),
            model_rng: stream_rng(config.seed, MODEL_STREAM),
            arch,
            config,
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        ck.check_arch(&ck.arch)?;
        Ok(Self {
            arch: ck.arch,
            config: ck.config,
            params: ck.params,
            optimizer: ck.optimizer,
            step: ck.step,
            data_rng: ck.data_rng,
            model_rng: ck.model_rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            arch: self.arch.clone(),
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            data_rng: self.data_rng.clone(),
            model_rng: self.model_rng.clone(),
        }
    }

    /// Checks that `data` can feed this model.
    pub fn check_source(&self, data: &dyn SceneSource) -> Result<()> {
        if data.is_empty() {
            return Err(MonetError::Config("training data is empty".into()));
        }
        if data.size() != (self.arch.height(), self.arch.width()) {
            return Err(MonetError::Config(format!(
                "data is {:?} but the model expects {}x{}",
                data.size(),
                self.arch.height(),
                self.arch.width()
            )));
        }
        let mode = self.config.mask_mode;
        if mode.is_provided() && data.mask_slots() != self.config.slots {
            return Err(MonetError::Config(format!(
                "mask mode {mode} needs one slot per ground-truth mask: data has {} masks, config has {} slots",
                data.mask_slots(),
                self.config.slots
            )));
        }
        if mode == MaskMode::WrongElementMasks && data.len() < 2 {
            return Err(MonetError::Config("wrong_element_masks needs at least two scenes".into()));
        }
        Ok(())
    }

    /// Draws a batch, runs forward and backward, and applies one RMSProp update.
    pub fn train_step(&mut self, data: &dyn SceneSource) -> Result<StepReport> {
        self.check_source(data)?;
        let (b, k) = (self.config.batch_size, self.config.slots);
        let (h, w) = data.size();
        let n = data.len();
        let indices: Vec<usize> = (0..b).map(|_| self.data_rng.random_range(0..n)).collect();
        let scenes = indices.iter().map(|&i| data.scene(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&LabeledScene> = scenes.iter().collect();
        let x = data::image_batch::<f32>(&refs)?;
        let masses = match self.config.mask_mode {
            MaskMode::Learned => None,
            MaskMode::AllInOne => Some(data::all_in_one_masks::<f32>(b, k, h, w)),
            MaskMode::ElementMasks => Some(data::mask_batch::<f32>(&refs, k)?),
            MaskMode::WrongElementMasks => {
                let others = indices
                    .iter()
                    .map(|&i| {
                        let j = self.data_rng.random_range(0..n - 1);
                        data.scene(if j >= i { j + 1 } else { j })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(data::mask_batch::<f32>(&others.iter().collect::<Vec<_>>(), k)?)
            }
        };
        let stack = masses.as_ref().map(log_masks_from_masses).transpose()?;
        let source = stack.as_ref().map_or(MaskSource::Learned { slots: k }, MaskSource::Provided);
        let noise = self.arch.draw_noise::<f32>(&mut self.model_rng, k, b);
        let loss_cfg = self.config.loss();

        let mut g = Graph::new();
        let mut bound = Bound::trainable(&self.params);
        let out = self.arch.forward(&mut g, &mut bound, &x, source, Some(noise), &loss_cfg)?;
        let loss = out.loss.breakdown(&g, &loss_cfg);
        if !loss.is_finite() {
            return Err(MonetError::NonFinite { tensor: "loss".into(), step: Some(self.step) });
        }
        let mut tape_grads = g.backward(out.loss.total)?;
        let grads = bound.collect_gradients(&mut tape_grads);
        drop(bound);
        drop(g);
        let c = &self.config;
        rmsprop_step(&mut self.params, &grads, &mut self.optimizer, c.learning_rate, c.rmsprop_decay, c.rmsprop_eps)
            .map_err(|e| match e {
                MonetError::NonFinite { tensor, .. } => MonetError::NonFinite { tensor, step: Some(self.step) },
                e => e,
            })?;
        let report = StepReport { step: self.step, loss, attention_calls: out.attention_calls };
        self.step += 1;
        Ok(report)
    }

    /// Trains until `self.step == until`, logging every step and writing
    /// checkpoints at the configured interval plus a final `latest.ckpt`.
    pub fn run(
        &mut self,
        data: &dyn SceneSource,
        until: u64,
        mut metrics: Option<&mut MetricWriter>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<TrainReport> {
        self.check_source(data)?;
        let first_step = self.step;
        let mut report = TrainReport {
            first_step,
            final_step: first_step,
            last_loss: None,
            attention_calls: 0,
            checkpoints: Vec::new(),
        };
        while self.step < until {
            let s = self.train_step(data)?;
            report.attention_calls += s.attention_calls as u64;
            report.last_loss = Some(s.loss);
            if let Some(m) = metrics.as_deref_mut() {
                m.write(MetricRow::new(s.step, &s.loss))?;
            }
            if s.step % 100 == 0 {
                log::info!(
                    "step {} total {:.3} nll {:.3} kl {:.3} mask_kl {:.3}",
                    s.step,
                    s.loss.total,
                    s.loss.nll,
                    s.loss.latent_kl,
                    s.loss.mask_kl
                );
            }
            let interval = self.config.checkpoint_interval;
            if let (Some(dir), true) = (checkpoint_dir, interval > 0 && self.step.is_multiple_of(interval)) {
                if let Some(m) = metrics.as_deref_mut() {
                    m.flush()?;
                }
                let path = dir.join(format!("step-{:08}.ckpt", self.step));
                self.checkpoint().save(&path)?;
                report.checkpoints.push(path);
            }
        }
        if let Some(m) = metrics {
            m.flush()?;
        }
        if let Some(dir) = checkpoint_dir {
            let path = dir.join("latest.ckpt");
            self.checkpoint().save(&path)?;
            report.checkpoints.push(path);
        }
        report.final_step = self.step;
        Ok(report)
    }
}

/// Evaluates the loss on a fixed batch without updating anything.
pub fn evaluate_loss<T: Scalar>(
    arch: &MonetArch,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    slots: usize,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let mut bound = Bound::frozen(params);
    let out = arch.forward(&mut g, &mut bound, x, MaskSource::Learned { slots }, None, &config.loss())?;
    Ok(out.loss.breakdown(&g, &config.loss()))
}
