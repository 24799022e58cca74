//! Minibatch Adam training with validation tracking, early stopping, and the
//! per-class best-checkpoint ensemble.
//!
//! Output directory layout after [`train`]:
//!
//! * `class_<name>.fseg` – network at the epoch of lowest validation loss for that class
//! * `best_total.fseg` – network at the epoch of lowest total validation loss
//! * `final.fseg` – network after the last completed epoch
//! * `ensemble.csv` – `class,checkpoint,epoch,val_loss`, one row per class plus `total`
//! * `history.csv` – `epoch,train_loss,val_loss,val_ma,...,val_bg`

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{augment_flips, load_sample, DatasetManifest, PrepOptions, Split};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{save_checkpoint, CheckpointMeta, NetConfig, Network};
use crate::objective::{bce_grad, bce_loss, AdamConfig, AdamState, LossReport};
use crate::tensor::{Prng, Tensor};
use crate::{CLASS_NAMES, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub batch_size: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub augment: bool,
    pub prep: PrepOptions,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            net: NetConfig::desk(),
            batch_size: 4,
            epochs_max: 200,
            patience: 10,
            adam: AdamConfig::default(),
            augment: true,
            prep: PrepOptions::default(),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.epochs_max == 0 {
            return Err(Error::Config("epochs_max must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0
            && a.lr.is_finite()
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.epsilon > 0.0)
        {
            return Err(Error::Config(format!("invalid Adam constants {a:?}")));
        }
        Ok(())
    }
}

/// A network input `[1, 3, H, W]` with its target `[1, 7, H, W]`.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: Tensor,
    pub target: Tensor,
}

/// Anything that maps an input batch to per-class probabilities.
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for Network {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Network::predict(self, x)
    }
}

/// Inference-mode loss averaged over validation examples.
pub fn validate<P: Predictor + ?Sized>(net: &P, val: &[Example]) -> Result<LossReport> {
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let reports = val.iter().map(|ex| bce_loss(&net.predict(&ex.input)?, &ex.target)).collect::<Result<Vec<_>>>()?;
    LossReport::mean(&reports)
}

/// Load one split as training examples, optionally with the four flip variants.
pub fn load_examples(data: &DatasetManifest, split: Split, prep: &PrepOptions, augment: bool) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for rec in data.split(split) {
        let s = load_sample(rec, prep)?;
        let variants = if augment { augment_flips(&s.image, &s.target) } else { vec![(s.image, s.target)] };
        for (img, t) in variants {
            out.push(Example { input: img.to_tensor(), target: t.to_tensor() });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: LossReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_ma,val_hem,val_ex,val_se,val_od,val_rd,val_bg";

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.epoch, r.train_loss, r.val.total);
            for v in &r.val.per_class {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEntry {
    /// Relative to the ensemble directory.
    pub checkpoint: PathBuf,
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleManifest {
    /// Indexed by class.
    pub classes: Vec<EnsembleEntry>,
    pub total: EnsembleEntry,
}

pub const ENSEMBLE_FILE: &str = "ensemble.csv";
pub const ENSEMBLE_HEADER: &str = "class,checkpoint,epoch,val_loss";

impl EnsembleManifest {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ENSEMBLE_HEADER}\n");
        let rows = CLASS_NAMES.iter().copied().zip(&self.classes).chain(std::iter::once(("total", &self.total)));
        for (name, e) in rows {
            let _ = writeln!(s, "{name},{},{},{}", e.checkpoint.display(), e.epoch, e.val_loss);
        }
        s
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(ENSEMBLE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let err = |row: usize, msg: String| Error::Load { path: path.clone(), row, msg };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(ENSEMBLE_HEADER) {
            return Err(err(1, format!("bad header, expected {ENSEMBLE_HEADER}")));
        }
        let mut classes: Vec<Option<EnsembleEntry>> = vec![None; NUM_CLASSES];
        let mut total = None;
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = i + 2;
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(err(row, format!("{} fields, expected 4", f.len())));
            }
            let entry = EnsembleEntry {
                checkpoint: PathBuf::from(f[1]),
                epoch: f[2].parse().map_err(|_| err(row, format!("bad epoch {:?}", f[2])))?,
                val_loss: f[3].parse().map_err(|_| err(row, format!("bad val_loss {:?}", f[3])))?,
            };
            match CLASS_NAMES.iter().position(|&n| n == f[0]) {
                Some(c) => classes[c] = Some(entry),
                None if f[0] == "total" => total = Some(entry),
                None => return Err(err(row, format!("unknown class {:?}", f[0]))),
            }
        }
        let classes = classes
            .into_iter()
            .enumerate()
            .map(|(c, e)| e.ok_or_else(|| err(0, format!("no entry for class {}", CLASS_NAMES[c]))))
            .collect::<Result<Vec<_>>>()?;
        let total = total.ok_or_else(|| err(0, "no entry for total".into()))?;
        Ok(Self { classes, total })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(ENSEMBLE_FILE);
        std::fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))
    }
}

/// Patience-based stopping on a monitored loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    /// Record an epoch's loss; returns true on strict improvement.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

fn checkpoint_name(class: Option<usize>) -> PathBuf {
    match class {
        Some(c) => PathBuf::from(format!("class_{}.fseg", CLASS_NAMES[c])),
        None => PathBuf::from("best_total.fseg"),
    }
}

/// Train on the manifest's `train` split, validating on `val`.
pub fn train(cfg: &TrainConfig, data: &DatasetManifest) -> Result<(EnsembleManifest, History)> {
    train_with_observer(cfg, data, &mut |_| {})
}

pub fn train_with_observer(
    cfg: &TrainConfig,
    data: &DatasetManifest,
    observer: &mut dyn FnMut(&HistoryRow),
) -> Result<(EnsembleManifest, History)> {
    cfg.validate()?;
    let train_set = load_examples(data, Split::Train, &cfg.prep, cfg.augment)?;
    let val_set = load_examples(data, Split::Val, &cfg.prep, false)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(format!(
            "need nonempty train and val splits (got {} train, {} val examples)",
            train_set.len(),
            val_set.len()
        )));
    }
    train_examples(cfg, &train_set, &val_set, observer)
}

fn stack_batch(set: &[Example], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let xs: Vec<&Tensor> = idx.iter().map(|&i| &set[i].input).collect();
    let ts: Vec<&Tensor> = idx.iter().map(|&i| &set[i].target).collect();
    let shape_err = |_| Error::Config("samples in a minibatch differ in size; set input_width/input_height".into());
    Ok((Tensor::stack(&xs).map_err(shape_err)?, Tensor::stack(&ts).map_err(shape_err)?))
}

/// Core loop over prepared examples.
pub fn train_examples(
    cfg: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    observer: &mut dyn FnMut(&HistoryRow),
) -> Result<(EnsembleManifest, History)> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut prng = Prng::new(cfg.seed);
    let mut net = Network::build(&cfg.net, &mut prng)?;
    let mut adam = AdamState::for_network(cfg.adam, &net);
    let mut history = History::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_class = [f64::INFINITY; NUM_CLASSES];
    let unset = EnsembleEntry { checkpoint: PathBuf::new(), epoch: 0, val_loss: f64::INFINITY };
    let mut ensemble = EnsembleManifest { classes: vec![unset.clone(); NUM_CLASSES], total: unset };

    for epoch in 1..=cfg.epochs_max {
        let order = prng.shuffle(train_set.len());
        let mut weighted = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, t) = stack_batch(train_set, batch)?;
            let (probs, mut cache) = net.forward(&x, Mode::Train)?;
            let loss = bce_loss(&probs, &t)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grads = net.backward(&mut cache, &bce_grad(&probs, &t)?)?;
            adam.step_network(&mut net, &grads)?;
            weighted += loss.total * batch.len() as f64;
        }
        let train_loss = weighted / train_set.len() as f64;
        let val = validate(&net, val_set)?;
        if !train_loss.is_finite() || !val.total.is_finite() || val.per_class.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }

        let meta = CheckpointMeta {
            epoch,
            per_class_val_loss: val.per_class.clone().try_into().map_err(|_| {
                Error::Config(format!("network has {} outputs, expected {NUM_CLASSES}", val.per_class.len()))
            })?,
        };
        for c in 0..NUM_CLASSES {
            if val.per_class[c] < best_class[c] {
                best_class[c] = val.per_class[c];
                let name = checkpoint_name(Some(c));
                save_checkpoint(&net, &meta, out.join(&name))?;
                ensemble.classes[c] = EnsembleEntry { checkpoint: name, epoch, val_loss: val.per_class[c] };
            }
        }
        if stopper.observe(epoch, val.total) {
            let name = checkpoint_name(None);
            save_checkpoint(&net, &meta, out.join(&name))?;
            ensemble.total = EnsembleEntry { checkpoint: name, epoch, val_loss: val.total };
        }
        let row = HistoryRow { epoch, train_loss, val };
        observer(&row);
        history.rows.push(row);
        if stopper.should_stop() {
            break;
        }
    }

    let last = history.rows.last().expect("at least one epoch");
    let meta = CheckpointMeta { epoch: last.epoch, per_class_val_loss: last.val.per_class.clone().try_into().unwrap() };
    save_checkpoint(&net, &meta, out.join("final.fseg"))?;
    let hist_path = out.join("history.csv");
    std::fs::write(&hist_path, history.to_csv()).map_err(|e| Error::io(&hist_path, e))?;
    ensemble.write(out)?;
    Ok((ensemble, history))
}
