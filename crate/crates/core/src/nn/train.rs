use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{ForwardOptions, Model};
use super::topology::{LayerMask, Topology};
use crate::autodiff::{log_sum_exp, AdamConfig, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Graph, Masks};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            weight_decay: 5e-4,
            decoupled_weight_decay: false,
            epochs: 500,
            patience: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Callbacks into the training loop, used by edge pruning.
pub trait TrainHook {
    /// Runs before the gradient step of `epoch` with the current model.
    fn before_epoch(&mut self, epoch: usize, model: &Model, topo: &Topology, features: &Tensor) -> Result<()>;

    /// Edge masks the forward pass should use, per layer.
    fn masks(&self) -> Option<&[LayerMask]>;

    /// Called when the model reaches a new best validation score.
    fn checkpoint(&mut self) {}

    /// Called once after training with the best checkpoint restored.
    fn restore_best(&mut self) {}
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Test accuracy of the best-validation checkpoint.
    pub test_acc: f64,
    pub seed: u64,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }
}

/// Fraction of `rows` whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows
        .iter()
        .filter(|&&i| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == labels[i]
        })
        .count();
    hits as f64 / rows.len() as f64
}

pub fn mean_cross_entropy(logits: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows
        .iter()
        .map(|&i| log_sum_exp(logits.row(i)) - logits.row(i)[labels[i]])
        .sum();
    total / rows.len() as f64
}

/// Full-batch semi-supervised training with early stopping on validation
/// accuracy. Returns the report and the best-validation parameters.
pub fn train(
    g: &Graph,
    masks: &Masks,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut hook: Option<&mut dyn TrainHook>,
) -> Result<(TrainReport, Model)> {
    masks.validate()?;
    if masks.train.len() != g.n_nodes() {
        return Err(Error::invalid("masks do not match the graph size"));
    }
    let topo = Topology::new(g);
    let mut model = Model::init(model_cfg, g.feature_dim(), g.n_classes(), train_cfg.seed)?;
    // A zero learning rate freezes the parameters; the optimizer itself
    // requires a positive rate.
    let mut adam = if train_cfg.lr == 0.0 {
        None
    } else {
        Some(AdamState::new(train_cfg.adam(), &model.parameter_shapes())?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let labels: Rc<[usize]> = g.labels().into();
    let train_rows: Rc<[usize]> = masks.train_indices().into();
    let (val_rows, test_rows) = (masks.val_indices(), masks.test_indices());

    let mut best: Option<(f64, f64, usize, f64, Model)> = None;
    let mut since_best = 0usize;
    let mut records = Vec::new();

    for epoch in 0..train_cfg.epochs {
        if let Some(h) = hook.as_deref_mut() {
            h.before_epoch(epoch, &model, &topo, g.features())?;
        }
        let layer_masks = hook.as_deref().and_then(|h| h.masks());

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.constant(g.features().clone());
        let out = model.forward(
            &mut tape,
            &bound,
            &topo,
            x,
            ForwardOptions {
                masks: layer_masks,
                dropout_rng: Some(&mut rng),
            },
        )?;
        let loss = tape.cross_entropy(out.logits, labels.clone(), train_rows.clone())?;
        let train_loss = tape.value(loss).get(0, 0);
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let grads = tape.backward(loss)?;
        let vars = Model::flatten_bound(&bound);
        let grad_list: Vec<Tensor> = vars
            .iter()
            .zip(model.parameter_shapes())
            .map(|(&v, s)| grads.get_or_zeros(v, s))
            .collect();
        if let Some(adam) = adam.as_mut() {
            adam.step(&mut model.parameters_mut(), &grad_list)?;
        } else if let Some(i) = grad_list.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i} at epoch {epoch}")));
        }

        let logits = model
            .predict(&topo, g.features(), layer_masks)?
            .pop()
            .expect("at least one layer");
        let rec = EpochRecord {
            epoch,
            train_loss,
            train_acc: accuracy(&logits, g.labels(), &train_rows),
            val_loss: mean_cross_entropy(&logits, g.labels(), &val_rows),
            val_acc: accuracy(&logits, g.labels(), &val_rows),
            test_acc: accuracy(&logits, g.labels(), &test_rows),
        };
        let improved = match &best {
            None => true,
            Some((acc, loss, ..)) => rec.val_acc > *acc || (rec.val_acc == *acc && rec.val_loss < *loss),
        };
        if improved {
            best = Some((rec.val_acc, rec.val_loss, epoch, rec.test_acc, model.clone()));
            since_best = 0;
            if let Some(h) = hook.as_deref_mut() {
                h.checkpoint();
            }
        } else {
            since_best += 1;
        }
        records.push(rec);
        if since_best >= train_cfg.patience {
            break;
        }
    }

    let Some((best_val_acc, _, best_epoch, test_acc, best_model)) = best else {
        return Err(Error::InvalidConfig("training ran for zero epochs".into()));
    };
    if let Some(h) = hook.as_deref_mut() {
        h.restore_best();
    }
    Ok((
        TrainReport {
            epochs: records,
            best_epoch,
            best_val_acc,
            test_acc,
            seed: train_cfg.seed,
        },
        best_model,
    ))
}
