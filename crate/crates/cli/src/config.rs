//! `key = value` run configuration. Blank lines and `#` comments are ignored,
//! absent keys take their defaults, and unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fundus_seg::data::PrepOptions;
use fundus_seg::train::TrainConfig;

pub const CONFIG_FILE: &str = "config.txt";

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "1", "PRNG seed for initialization and shuffling"),
    ("convs_per_stage", "2,2", "convolutions per encoder stage, comma separated"),
    ("channels_per_stage", "8,16", "feature channels per encoder stage"),
    ("bn_momentum", "0.1", "batch-norm running-statistics momentum"),
    ("bn_epsilon", "1e-5", "batch-norm variance epsilon"),
    ("batch_size", "4", "minibatch size"),
    ("epochs_max", "200", "maximum number of epochs"),
    ("patience", "10", "epochs without validation improvement before stopping"),
    ("lr", "0.001", "Adam learning rate"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("epsilon", "1e-8", "Adam denominator epsilon"),
    ("augment", "true", "add horizontal, vertical and 180-degree flips of training images"),
    ("input_width", "", "network input width; empty keeps native resolution"),
    ("input_height", "", "network input height; set together with input_width"),
    ("retina_threshold", "20", "channel-mean level separating retina from background"),
    ("boost", "true", "apply the channel softmax at inference"),
    ("loc_penalty", "", "optic-disk distance charged for a missing prediction; empty = image diagonal"),
];

pub fn keys_help() -> String {
    let mut s = String::from("Config keys (key = value, one per line, # comments):\n");
    for (k, d, desc) in KEYS {
        let d = if d.is_empty() { "<unset>" } else { d };
        let _ = writeln!(s, "  {k:<20} {desc} [default: {d}]");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `out_dir` is ignored; the command line supplies it.
    pub train: TrainConfig,
    pub boost: bool,
    pub loc_penalty: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults parse")
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("{key}: cannot parse {v:?}"))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: Vec<(&str, String)> = KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect();
        let mut seen = vec![false; KEYS.len()];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let k = k.trim();
            let slot = KEYS.iter().position(|(name, _, _)| *name == k).ok_or_else(|| {
                anyhow!("line {}: unknown key {k:?} (see `fundus-seg train --help` for the key list)", i + 1)
            })?;
            if std::mem::replace(&mut seen[slot], true) {
                bail!("line {}: key {k:?} given twice", i + 1);
            }
            values[slot].1 = v.trim().to_string();
        }
        let get = |k: &str| values.iter().find(|(n, _)| *n == k).map(|(_, v)| v.as_str()).unwrap();

        let mut t = TrainConfig::default();
        t.seed = num("seed", get("seed"))?;
        t.net.convs_per_stage = list("convs_per_stage", get("convs_per_stage"))?;
        t.net.channels_per_stage = list("channels_per_stage", get("channels_per_stage"))?;
        t.net.bn_momentum = num("bn_momentum", get("bn_momentum"))?;
        t.net.bn_epsilon = num("bn_epsilon", get("bn_epsilon"))?;
        t.batch_size = num("batch_size", get("batch_size"))?;
        t.epochs_max = num("epochs_max", get("epochs_max"))?;
        t.patience = num("patience", get("patience"))?;
        t.adam.lr = num("lr", get("lr"))?;
        t.adam.beta1 = num("beta1", get("beta1"))?;
        t.adam.beta2 = num("beta2", get("beta2"))?;
        t.adam.epsilon = num("epsilon", get("epsilon"))?;
        t.augment = flag("augment", get("augment"))?;
        let w: Option<usize> = optional("input_width", get("input_width"))?;
        let h: Option<usize> = optional("input_height", get("input_height"))?;
        let input_size = match (w, h) {
            (Some(w), Some(h)) if w > 0 && h > 0 => Some((w, h)),
            (None, None) => None,
            _ => bail!("input_width and input_height must both be positive or both unset"),
        };
        t.prep = PrepOptions { input_size, retina_threshold: num("retina_threshold", get("retina_threshold"))? };
        t.validate().map_err(|e| anyhow!("{e}"))?;

        let loc_penalty = optional::<f64>("loc_penalty", get("loc_penalty"))?;
        if loc_penalty.is_some_and(|p| !(p >= 0.0 && p.is_finite())) {
            bail!("loc_penalty must be a nonnegative number");
        }
        Ok(Self { train: t, boost: flag("boost", get("boost"))?, loc_penalty })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Config stored next to a trained ensemble, or defaults when there is none.
    pub fn for_ensemble(dir: &Path) -> Result<Self> {
        let p = dir.join(CONFIG_FILE);
        if p.is_file() {
            Self::load(&p)
        } else {
            Ok(Self::default())
        }
    }

    /// Every key with its effective value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let (w, h) = t.prep.input_size.map_or((String::new(), String::new()), |(w, h)| (w.to_string(), h.to_string()));
        let values = [
            t.seed.to_string(),
            join(&t.net.convs_per_stage),
            join(&t.net.channels_per_stage),
            t.net.bn_momentum.to_string(),
            t.net.bn_epsilon.to_string(),
            t.batch_size.to_string(),
            t.epochs_max.to_string(),
            t.patience.to_string(),
            t.adam.lr.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.epsilon.to_string(),
            t.augment.to_string(),
            w,
            h,
            t.prep.retina_threshold.to_string(),
            self.boost.to_string(),
            self.loc_penalty.map(|p| p.to_string()).unwrap_or_default(),
        ];
        let mut s = String::new();
        for ((k, _, _), v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
