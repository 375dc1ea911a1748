//! Classifier training for source and victim models.

use crate::error::{CoreError, Result};
use crate::nn::{Classifier, ClassifierCfg};
use crate::rng::Rng;
use crate::tensor::{Binding, Optimizer, ParamStore, Tape};

use super::{LabeledData, TrainConfig};

#[derive(Debug)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub store: ParamStore,
    pub test_accuracy: f32,
    /// mean cross-entropy per epoch (train split)
    pub loss_curve: Vec<f32>,
}

pub fn accuracy(clf: &Classifier, store: &ParamStore, data: &LabeledData) -> Result<f32> {
    let preds = clf.predict(store, &data.inputs)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f32 / data.len().max(1) as f32)
}

/// Train on a disjoint split of `data`, report held-out accuracy.
pub fn train_classifier(
    cfg: ClassifierCfg,
    data: &LabeledData,
    tcfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    tcfg.validate()?;
    if data.classes != cfg.classes {
        return Err(CoreError::InvalidArgument(format!(
            "dataset has {} classes, classifier expects {}",
            data.classes, cfg.classes
        )));
    }
    let root = Rng::seed_from(tcfg.seed);
    let mut init_rng = root.fork(1);
    let mut split_rng = root.fork(2);
    let mut shuffle_rng = root.fork(3);

    let (train, test) = data.split(tcfg.eval_split, &mut split_rng)?;
    let mut store = ParamStore::new();
    let clf = Classifier::init(&mut store, cfg, &mut init_rng)?;

    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.lr);
    let mut curve = Vec::with_capacity(tcfg.epochs);
    let mut global_step = 0usize;

    for _epoch in 0..tcfg.epochs {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut idx);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in idx.chunks(tcfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let mut bind = Binding::new();
                let xv = tape.constant(&x);
                let logits = clf.forward(&mut tape, &mut bind, &store, xv)?;
                let loss = tape.softmax_cross_entropy(logits, &y)?;
                let loss_val = tape.scalar(loss)?;
                let grads = tape.backward(loss)?;
                let gmap = bind.grad_map(&tape, &store, &grads);
                opt.step(&mut store, &gmap)?;
                Ok(loss_val)
            };
            match step() {
                Ok(v) => {
                    epoch_loss += v;
                    batches += 1;
                    global_step += 1;
                }
                Err(CoreError::NonFinite(_)) => {
                    return Err(CoreError::Diverged { step: global_step });
                }
                Err(e) => return Err(e),
            }
        }
        curve.push((epoch_loss / batches.max(1) as f64) as f32);
    }

    store.freeze_all();
    let test_accuracy = accuracy(&clf, &store, &test)?;
    Ok(TrainedClassifier { classifier: clf, store, test_accuracy, loss_curve: curve })
}
