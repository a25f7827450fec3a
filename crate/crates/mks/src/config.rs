//! Run configuration in a flat INI dialect.
//!
//! Grammar, one construct per line:
//!
//! ```text
//! line     := blank | comment | section | entry
//! comment  := ("#" | ";") any*
//! section  := "[" name "]"
//! entry    := key "=" value          ; leading/trailing blanks trimmed
//! list     := value ("," value)*     ; for list-valued keys
//! ```
//!
//! Entries must follow a section header. Sections and keys are fixed (see
//! [`RunConfig::to_ini`] for the complete set); an unknown, duplicated or
//! malformed entry is an error naming `section.key`. Comments only occupy
//! whole lines. Per-stage keys (`depths`, `channels`, `downsample`,
//! `branches`, `max_size`, `reduction`) take one value per stage; the last
//! three also accept a single value applied to every stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mks_core::backbone::{BackboneConfig, PatchEmbedConfig, StageConfig, Variant};
use mks_core::train::TrainConfig;

use crate::error::{Error, Result};

/// Everything a command needs: the training setup, seeds and output locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Seed of single runs (`train`, `erf`, `export`).
    pub seed: u64,
    /// Seeds of the ablation.
    pub seeds: Vec<u64>,
    pub erf_samples: usize,
    /// Side of the square ERF input.
    pub erf_size: usize,
    pub out: PathBuf,
    /// Weight file path; defaults to `<out>/weights.mksw`.
    pub weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            seed: 0,
            seeds: vec![0, 1, 2],
            erf_samples: 16,
            erf_size: 33,
            out: PathBuf::from("out"),
            weights: None,
        }
    }
}

type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

const KEYS: &[(&str, &[&str])] = &[
    (
        "model",
        &[
            "variant",
            "in_channels",
            "patch_kernel",
            "patch_stride",
            "patch_channels",
            "depths",
            "channels",
            "downsample",
            "branches",
            "max_size",
            "reduction",
        ],
    ),
    (
        "data",
        &[
            "height",
            "width",
            "train_samples",
            "val_samples",
            "max_streaks",
            "max_chains",
            "noise",
            "contrast",
        ],
    ),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "lr",
            "betas",
            "eps",
            "weight_decay",
            "residual_init",
            "seed",
            "seeds",
        ],
    ),
    ("erf", &["samples", "size"]),
    ("io", &["out", "weights"]),
];

fn tokenize(text: &str) -> Result<Sections> {
    let mut sections = Sections::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| {
                    Error::config(
                        format!("line {lineno}"),
                        format!("unterminated section header '{line}'"),
                    )
                })?
                .trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(Error::config(format!("[{name}]"), "unknown section"));
            }
            sections.entry(name.to_string()).or_default();
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {lineno}"),
                format!("expected 'key = value', got '{line}'"),
            )
        })?;
        let key = key.trim();
        let section = current
            .as_deref()
            .ok_or_else(|| Error::config(key, format!("line {lineno}: entry outside of a section")))?;
        let field = format!("{section}.{key}");
        let known = KEYS
            .iter()
            .find(|(s, _)| *s == section)
            .is_some_and(|(_, ks)| ks.contains(&key));
        if !known {
            return Err(Error::config(field, "unknown key"));
        }
        let entries = sections.get_mut(section).expect("section registered above");
        if entries
            .insert(key.to_string(), (lineno, value.trim().to_string()))
            .is_some()
        {
            return Err(Error::config(field, "duplicate key"));
        }
    }
    Ok(sections)
}

struct Fields {
    sections: Sections,
}

impl Fields {
    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|(_, v)| v.as_str())
    }

    fn parse<T: FromStr>(&self, section: &str, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.raw(section, key) {
            *target = parse_value(section, key, v)?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(section, key)
            .map(|v| {
                v.split(',')
                    .map(|item| parse_value(section, key, item.trim()))
                    .collect()
            })
            .transpose()
    }
}

fn parse_value<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::config(format!("{section}.{key}"), format!("cannot parse '{v}': {e}")))
}

/// Per-stage values: `len` entries, or one entry broadcast when `broadcast`.
fn per_stage<T: Clone>(field: &str, values: Vec<T>, len: usize, broadcast: bool) -> Result<Vec<T>> {
    match values.len() {
        n if n == len => Ok(values),
        1 if broadcast => Ok(vec![values[0].clone(); len]),
        n => Err(Error::config(
            field,
            format!("expected {len} per-stage values, got {n}"),
        )),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let f = Fields {
            sections: tokenize(text)?,
        };
        let mut cfg = RunConfig::default();
        let t = &mut cfg.train;

        let m = &mut t.model;
        f.parse("model", "variant", &mut m.variant)?;
        f.parse("model", "in_channels", &mut m.in_channels)?;
        f.parse("model", "patch_kernel", &mut m.patch_embed.kernel)?;
        f.parse("model", "patch_stride", &mut m.patch_embed.stride)?;
        f.parse("model", "patch_channels", &mut m.patch_embed.channels)?;
        let depths: Vec<usize> = f
            .list("model", "depths")?
            .unwrap_or_else(|| m.stages.iter().map(|s| s.depth).collect());
        let n = depths.len();
        let keep = |get: fn(&StageConfig) -> usize| -> Vec<usize> {
            let cur: Vec<usize> = m.stages.iter().map(get).collect();
            if cur.len() == n {
                cur
            } else {
                vec![cur.last().copied().unwrap_or(0); n]
            }
        };
        let widths = match f.list::<usize>("model", "channels")? {
            Some(v) => per_stage("model.channels", v, n, false)?,
            None => keep(|s| s.channels),
        };
        let downsample = match f.list::<bool>("model", "downsample")? {
            Some(v) => per_stage("model.downsample", v, n, false)?,
            None if m.stages.len() == n => m.stages.iter().map(|s| s.downsample).collect(),
            None => (0..n).map(|i| i > 0).collect(),
        };
        let broadcast = |key: &str, get: fn(&StageConfig) -> usize| -> Result<Vec<usize>> {
            match f.list::<usize>("model", key)? {
                Some(v) => per_stage(&format!("model.{key}"), v, n, true),
                None => Ok(keep(get)),
            }
        };
        let branches = broadcast("branches", |s| s.branches)?;
        let max_size = broadcast("max_size", |s| s.max_size)?;
        let reduction = broadcast("reduction", |s| s.reduction)?;
        m.stages = (0..n)
            .map(|i| StageConfig {
                depth: depths[i],
                channels: widths[i],
                branches: branches[i],
                max_size: max_size[i],
                reduction: reduction[i],
                downsample: downsample[i],
            })
            .collect();

        f.parse("data", "height", &mut t.height)?;
        f.parse("data", "width", &mut t.width)?;
        f.parse("data", "train_samples", &mut t.train_samples)?;
        f.parse("data", "val_samples", &mut t.val_samples)?;
        f.parse("data", "max_streaks", &mut t.clutter.max_streaks)?;
        f.parse("data", "max_chains", &mut t.clutter.max_chains)?;
        f.parse("data", "noise", &mut t.clutter.noise)?;
        if let Some(c) = f.list::<f64>("data", "contrast")? {
            let [lo, hi] = c[..] else {
                return Err(Error::config("data.contrast", "expected 'low, high'"));
            };
            t.clutter.contrast = (lo, hi);
        }

        f.parse("train", "epochs", &mut t.epochs)?;
        f.parse("train", "batch_size", &mut t.batch_size)?;
        f.parse("train", "lr", &mut t.optimizer.lr)?;
        if let Some(b) = f.list::<f64>("train", "betas")? {
            let [b1, b2] = b[..] else {
                return Err(Error::config("train.betas", "expected 'beta1, beta2'"));
            };
            t.optimizer.beta1 = b1;
            t.optimizer.beta2 = b2;
        }
        f.parse("train", "eps", &mut t.optimizer.eps)?;
        f.parse("train", "weight_decay", &mut t.optimizer.weight_decay)?;
        f.parse("train", "residual_init", &mut t.residual_init)?;
        f.parse("train", "seed", &mut cfg.seed)?;
        if let Some(s) = f.list("train", "seeds")? {
            cfg.seeds = s;
        }

        f.parse("erf", "samples", &mut cfg.erf_samples)?;
        f.parse("erf", "size", &mut cfg.erf_size)?;
        if let Some(v) = f.raw("io", "out") {
            cfg.out = PathBuf::from(v);
        }
        cfg.weights = f.raw("io", "weights").map(PathBuf::from);

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks every field against the module contracts; the error names the
    /// offending section.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        t.model
            .validate()
            .map_err(|e| Error::config("[model]", e.to_string()))?;
        t.model
            .validate_input(t.height, t.width)
            .map_err(|e| Error::config("data.height/data.width", e.to_string()))?;
        t.data()
            .validate()
            .map_err(|e| Error::config("[data]", e.to_string()))?;
        let c = &t.clutter;
        if !(c.noise >= 0.0 && c.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be a non-negative number"));
        }
        if !(0.0 <= c.contrast.0 && c.contrast.0 <= c.contrast.1 && c.contrast.1.is_finite()) {
            return Err(Error::config("data.contrast", "expected 0 <= low <= high"));
        }
        t.validate().map_err(|e| Error::config("[train]", e.to_string()))?;
        if !(t.residual_init.is_finite()) {
            return Err(Error::config("train.residual_init", "must be finite"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("train.seeds", "at least one seed is required"));
        }
        if self.erf_samples == 0 {
            return Err(Error::config("erf.samples", "must be positive"));
        }
        if self.erf_size < 3 {
            return Err(Error::config("erf.size", "must be at least 3"));
        }
        Ok(())
    }

    pub fn weights_path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| self.out.join("weights.mksw"))
    }

    /// The configuration in the INI dialect; parsing it gives back `self`.
    pub fn to_ini(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let join = |v: Vec<String>| v.join(", ");
        let stages = |get: fn(&StageConfig) -> String| join(m.stages.iter().map(get).collect());
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "variant = {}", m.variant);
        let _ = writeln!(s, "in_channels = {}", m.in_channels);
        let _ = writeln!(s, "patch_kernel = {}", m.patch_embed.kernel);
        let _ = writeln!(s, "patch_stride = {}", m.patch_embed.stride);
        let _ = writeln!(s, "patch_channels = {}", m.patch_embed.channels);
        let _ = writeln!(s, "depths = {}", stages(|st| st.depth.to_string()));
        let _ = writeln!(s, "channels = {}", stages(|st| st.channels.to_string()));
        let _ = writeln!(s, "downsample = {}", stages(|st| st.downsample.to_string()));
        let _ = writeln!(s, "branches = {}", stages(|st| st.branches.to_string()));
        let _ = writeln!(s, "max_size = {}", stages(|st| st.max_size.to_string()));
        let _ = writeln!(s, "reduction = {}", stages(|st| st.reduction.to_string()));
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "height = {}", t.height);
        let _ = writeln!(s, "width = {}", t.width);
        let _ = writeln!(s, "train_samples = {}", t.train_samples);
        let _ = writeln!(s, "val_samples = {}", t.val_samples);
        let _ = writeln!(s, "max_streaks = {}", t.clutter.max_streaks);
        let _ = writeln!(s, "max_chains = {}", t.clutter.max_chains);
        let _ = writeln!(s, "noise = {:?}", t.clutter.noise);
        let _ = writeln!(s, "contrast = {:?}, {:?}", t.clutter.contrast.0, t.clutter.contrast.1);
        let o = &t.optimizer;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr = {:?}", o.lr);
        let _ = writeln!(s, "betas = {:?}, {:?}", o.beta1, o.beta2);
        let _ = writeln!(s, "eps = {:?}", o.eps);
        let _ = writeln!(s, "weight_decay = {:?}", o.weight_decay);
        let _ = writeln!(s, "residual_init = {:?}", t.residual_init);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "seeds = {}", join(self.seeds.iter().map(u64::to_string).collect()));
        let _ = writeln!(s, "\n[erf]");
        let _ = writeln!(s, "samples = {}", self.erf_samples);
        let _ = writeln!(s, "size = {}", self.erf_size);
        let _ = writeln!(s, "\n[io]");
        let _ = writeln!(s, "out = {}", self.out.display());
        if let Some(w) = &self.weights {
            let _ = writeln!(s, "weights = {}", w.display());
        }
        s
    }
}

/// Backbone for a quick smoke configuration: one 8-channel stage at stride 4.
pub fn smoke_model() -> BackboneConfig {
    BackboneConfig {
        in_channels: 3,
        patch_embed: PatchEmbedConfig {
            kernel: 4,
            stride: 4,
            channels: 8,
        },
        stages: vec![StageConfig {
            depth: 1,
            channels: 8,
            branches: 2,
            max_size: 7,
            reduction: 4,
            downsample: false,
        }],
        variant: Variant::BaseSaCa,
    }
}
