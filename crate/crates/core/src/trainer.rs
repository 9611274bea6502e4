//! SGD with momentum on the combined coarse/fine objective, optional
//! head-only warm-up phase, per-epoch evaluation and JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::TrunkConfig;
use crate::data::{make_batches, Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{batch_cross_entropy, generalized_cross_entropy, BatchLabels, PenaltyConfig, Reduction};
use crate::metrics::evaluate;
use crate::network::{BackwardScope, ForwardCache, SbpNetwork};
use crate::tensor::{Parameter, Rng, RngState, Tensor};
use crate::tree::LabelTree;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    /// Learning rate is divided by this every `every_epochs` epochs.
    pub factor: f64,
    pub every_epochs: usize,
}

/// Head-only phase run before end-to-end training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStep {
    pub head_epochs: usize,
    pub head_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// End-to-end epochs (after the head-only phase, if any).
    pub epochs: usize,
    pub batch_size: usize,
    pub penalty: PenaltyConfig,
    pub reduction: Reduction,
    pub lr_decay: Option<LrDecay>,
    pub two_step: Option<TwoStep>,
    /// When false the coarse head is detached and only the fine loss trains
    /// the network.
    pub two_branch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 40,
            batch_size: 16,
            penalty: PenaltyConfig::default(),
            reduction: Reduction::Mean,
            lr_decay: Some(LrDecay {
                factor: 10.0,
                every_epochs: 30,
            }),
            two_step: None,
            two_branch: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(d) = self.lr_decay {
            if d.factor.is_nan() || d.factor <= 0.0 || d.every_epochs == 0 {
                return bad("lr_decay needs a positive factor and period".into());
            }
        }
        if let Some(t) = self.two_step {
            if !(t.head_lr >= 0.0 && t.head_lr.is_finite()) {
                return bad("two_step.head_lr must be non-negative".into());
            }
        }
        self.penalty.validate()
    }

    pub fn head_epochs(&self) -> usize {
        self.two_step.map_or(0, |t| t.head_epochs)
    }

    pub fn total_epochs(&self) -> usize {
        self.head_epochs() + self.epochs
    }

    /// Learning rate and backward scope for a (0-based) epoch.
    pub fn schedule(&self, epoch: usize) -> (f64, BackwardScope) {
        let (base, local, scope) = match self.two_step {
            Some(t) if epoch < t.head_epochs => (t.head_lr, epoch, BackwardScope::HeadsOnly),
            Some(t) => (self.lr, epoch - t.head_epochs, BackwardScope::Full),
            None => (self.lr, epoch, BackwardScope::Full),
        };
        let lr = match self.lr_decay {
            Some(d) => base / d.factor.powi((local / d.every_epochs) as i32),
            None => base,
        };
        (lr, scope)
    }
}

/// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`.
pub fn sgd_step(params: &mut [&mut Parameter], buffers: &mut [Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if params.len() != buffers.len() {
        return Err(Error::shape("one momentum buffer per parameter is required"));
    }
    for (p, v) in params.iter_mut().zip(buffers.iter_mut()) {
        p.value.check_same_shape(&p.grad)?;
        p.value.check_same_shape(v)?;
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.data_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *wi);
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub coarse_acc: f64,
    pub fine_acc: f64,
    pub violation_rate: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,coarse_acc,fine_acc,violation_rate\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.coarse_acc, r.fine_acc, r.violation_rate
        ));
    }
    out
}

pub struct Trainer {
    net: SbpNetwork,
    tree: LabelTree,
    config: TrainConfig,
    momentum: Vec<Tensor>,
    epoch: usize,
    history: Vec<EpochRecord>,
    rng: Rng,
}

impl Trainer {
    /// Fresh network initialized from `config.seed`.
    pub fn new(trunk: TrunkConfig, tree: LabelTree, config: TrainConfig) -> Result<Self> {
        let mut rng = Rng::new(config.seed);
        let net = SbpNetwork::init(trunk, tree.num_coarse(), tree.num_fine(), &mut rng)?;
        Self::build(net, tree, config, rng)
    }

    pub fn with_network(net: SbpNetwork, tree: LabelTree, config: TrainConfig) -> Result<Self> {
        let rng = Rng::new(config.seed);
        Self::build(net, tree, config, rng)
    }

    fn build(net: SbpNetwork, tree: LabelTree, config: TrainConfig, rng: Rng) -> Result<Self> {
        config.validate()?;
        if net.num_coarse() != tree.num_coarse() || net.num_fine() != tree.num_fine() {
            return Err(Error::shape("network heads do not match the label tree"));
        }
        let momentum = net.named_params().iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Self {
            net,
            tree,
            config,
            momentum,
            epoch: 0,
            history: Vec::new(),
            rng,
        })
    }

    pub fn network(&self) -> &SbpNetwork {
        &self.net
    }

    pub fn into_network(self) -> SbpNetwork {
        self.net
    }

    pub fn tree(&self) -> &LabelTree {
        &self.tree
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Changes the end-to-end epoch budget, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.epochs = epochs;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    fn check_data(&self, ds: &Dataset) -> Result<()> {
        if ds.shape != self.net.config().input {
            return Err(Error::shape(format!(
                "dataset samples are {:?}, network expects {:?}",
                ds.shape,
                self.net.config().input
            )));
        }
        if ds.tree != self.tree {
            return Err(Error::InconsistentLabels("dataset label tree differs from the trainer's".into()));
        }
        Ok(())
    }

    pub fn train_epoch(&mut self, train: &Dataset, eval: &Dataset) -> Result<EpochRecord> {
        self.check_data(train)?;
        self.check_data(eval)?;
        let cfg = &self.config;
        let (lr, scope) = cfg.schedule(self.epoch);
        let batches = make_batches(train.len(), cfg.batch_size, cfg.seed, self.epoch)?;
        let mut loss_sum = 0.0;

        for (bi, batch) in batches.iter().enumerate() {
            self.net.zero_grad();
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train.samples[i]).collect();
            let obj = batch_objective(&mut self.net, &self.tree, cfg, &samples, scope)?;
            if !obj.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: bi,
                    value: obj.loss,
                });
            }
            loss_sum += obj.loss * batch.len() as f64;

            let skip = match scope {
                BackwardScope::Full => 0,
                BackwardScope::HeadsOnly => self.net.num_trunk_params(),
            };
            let mut params = self.net.params_mut();
            sgd_step(&mut params[skip..], &mut self.momentum[skip..], lr, cfg.momentum, cfg.weight_decay)?;
        }

        let report = evaluate(&self.net, &eval.samples, &self.tree)?;
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: loss_sum / train.len() as f64,
            coarse_acc: report.coarse_top1_via_fine,
            fine_acc: report.fine_top1,
            violation_rate: report.violation_rate,
        };
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Trains until `epoch` epochs have completed (capped at the config total).
    pub fn run_until(&mut self, train: &Dataset, eval: &Dataset, epoch: usize) -> Result<()> {
        let stop = epoch.min(self.config.total_epochs());
        while self.epoch < stop {
            self.train_epoch(train, eval)?;
        }
        Ok(())
    }

    pub fn run(&mut self, train: &Dataset, eval: &Dataset) -> Result<()> {
        self.run_until(train, eval, self.config.total_epochs())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let named = |tensors: Vec<(String, &Tensor)>| {
            tensors
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect()
        };
        let params = self.net.named_params();
        let momentum = params.iter().zip(&self.momentum).map(|((n, _), v)| (n.clone(), v)).collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            trunk: self.net.config().clone(),
            train: self.config.clone(),
            tree: self.tree.clone(),
            epoch: self.epoch,
            rng: self.rng.state(),
            params: named(params.iter().map(|(n, p)| (n.clone(), &p.value)).collect()),
            momentum: named(momentum),
            history: self.history.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(ckpt.trunk.clone(), ckpt.tree.clone(), ckpt.train.clone())?;
        let expected = trainer.net.named_params().iter().map(|(n, p)| (n.clone(), p.value.shape().to_vec())).collect::<Vec<_>>();
        let restore = |entries: &[NamedTensor], what: &str| -> Result<Vec<Tensor>> {
            if entries.len() != expected.len() {
                return Err(Error::shape(format!(
                    "checkpoint has {} {what} tensors, network needs {}",
                    entries.len(),
                    expected.len()
                )));
            }
            entries
                .iter()
                .zip(&expected)
                .map(|(e, (name, shape))| {
                    if &e.name != name || &e.shape != shape {
                        return Err(Error::shape(format!(
                            "{what} entry {}{:?} where {name}{shape:?} was expected",
                            e.name, e.shape
                        )));
                    }
                    let t = Tensor::new(e.shape.clone(), e.values.clone())?;
                    t.ensure_finite(&e.name)?;
                    Ok(t)
                })
                .collect()
        };
        let values = restore(&ckpt.params, "parameter")?;
        trainer.momentum = restore(&ckpt.momentum, "momentum")?;
        for (p, v) in trainer.net.params_mut().into_iter().zip(values) {
            p.value = v;
        }
        if ckpt.epoch > ckpt.train.total_epochs() || ckpt.history.len() != ckpt.epoch {
            return Err(Error::MalformedDocument("checkpoint epoch and history disagree".into()));
        }
        trainer.epoch = ckpt.epoch;
        trainer.history = ckpt.history.clone();
        trainer.rng = Rng::from_state(&ckpt.rng)?;
        Ok(trainer)
    }
}

/// Loss of one batch, with gradients accumulated into the network.
#[derive(Clone, Debug)]
pub struct BatchObjective {
    pub loss: f64,
    /// Per-sample input gradients (zero under [`BackwardScope::HeadsOnly`]).
    pub input_grads: Vec<Tensor>,
    /// Distance to the nearest non-differentiable point of the objective:
    /// activation kinks and fine-logit argmax ties, which switch the penalty.
    pub kink_distance: f64,
}

/// `W_t·CE(coarse) + W_g·GCE(fine)`, or the fine GCE alone when the coarse
/// branch is detached. Backward is skipped when the loss is not finite.
pub fn batch_objective(
    net: &mut SbpNetwork,
    tree: &LabelTree,
    cfg: &TrainConfig,
    samples: &[&Sample],
    scope: BackwardScope,
) -> Result<BatchObjective> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut caches = Vec::with_capacity(n);
    let mut z_fine = Vec::new();
    let mut z_coarse = Vec::new();
    for s in samples {
        let out = net.forward_train(&s.x)?;
        z_fine.extend_from_slice(out.z_fine.data());
        z_coarse.extend_from_slice(out.z_coarse.data());
        caches.push(out.cache);
    }
    let z_fine = Tensor::new(vec![n, tree.num_fine()], z_fine)?;
    let z_coarse = Tensor::new(vec![n, tree.num_coarse()], z_coarse)?;
    let labels = BatchLabels::new(
        samples.iter().map(|s| s.coarse).collect(),
        samples.iter().map(|s| s.fine).collect(),
        tree,
    )?;

    let gce = generalized_cross_entropy(&z_fine, &labels, tree, cfg.penalty.b, cfg.reduction)?;
    let (w_coarse, w_fine) = if cfg.two_branch { cfg.penalty.r.weights() } else { (0.0, 1.0) };
    let coarse = if cfg.two_branch {
        Some(batch_cross_entropy(&z_coarse, &labels.coarse, cfg.reduction)?)
    } else {
        None
    };
    let loss = match &coarse {
        Some(ce) => w_coarse * ce.loss + w_fine * gce.loss,
        None => gce.loss,
    };
    let mut kink_distance = caches.iter().map(ForwardCache::kink_distance).fold(f64::INFINITY, f64::min);
    for i in 0..n {
        kink_distance = kink_distance.min(top_margin(z_fine.row(i)));
    }
    if !loss.is_finite() {
        return Ok(BatchObjective {
            loss,
            input_grads: Vec::new(),
            kink_distance,
        });
    }

    let mut input_grads = Vec::with_capacity(n);
    for (row, cache) in caches.iter().enumerate() {
        let dz_f = Tensor::from_vec(gce.grad.row(row).iter().map(|g| w_fine * g).collect());
        let dz_c = coarse
            .as_ref()
            .map(|ce| Tensor::from_vec(ce.grad.row(row).iter().map(|g| w_coarse * g).collect()));
        input_grads.push(net.backward(cache, dz_c.as_ref(), &dz_f, scope)?);
    }
    Ok(BatchObjective {
        loss,
        input_grads,
        kink_distance,
    })
}

/// Gap between the largest and second-largest entry.
fn top_margin(z: &[f64]) -> f64 {
    let mut v = z.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.get(1).map_or(f64::INFINITY, |second| v[0] - second)
}

/// Trains a fresh network for the configured number of epochs.
pub fn train(
    trunk: TrunkConfig,
    train: &Dataset,
    eval: &Dataset,
    config: TrainConfig,
) -> Result<(SbpNetwork, Vec<EpochRecord>)> {
    let mut t = Trainer::new(trunk, train.tree.clone(), config)?;
    t.run(train, eval)?;
    let history = t.history.clone();
    Ok((t.net, history))
}

pub const CHECKPOINT_FORMAT: &str = "sbp-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub trunk: TrunkConfig,
    pub train: TrainConfig,
    pub tree: LabelTree,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub params: Vec<NamedTensor>,
    pub momentum: Vec<NamedTensor>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::MalformedDocument(format!("checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::MalformedDocument(format!("unknown checkpoint format {:?}", ckpt.format)));
        }
        // shape consistency between config, tree and tensors
        Trainer::from_checkpoint(&ckpt)?;
        Ok(ckpt)
    }

    pub fn network(&self) -> Result<SbpNetwork> {
        Ok(Trainer::from_checkpoint(self)?.net)
    }

    /// Errors when the dataset cannot be fed to the checkpointed network.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.shape != self.trunk.input {
            return Err(Error::shape(format!(
                "dataset samples are {:?}, checkpoint network expects {:?}",
                ds.shape, self.trunk.input
            )));
        }
        if ds.tree.num_fine() != self.tree.num_fine() || ds.tree.num_coarse() != self.tree.num_coarse() {
            return Err(Error::shape("dataset class counts differ from the checkpoint's heads"));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::MalformedDocument(format!("{}: {e}", path.display())))?;
    Checkpoint::parse(&text)
}
