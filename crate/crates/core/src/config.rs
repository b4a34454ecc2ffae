//! Run configuration files.
//!
//! Grammar (line oriented, UTF-8):
//!
//! ```text
//! file     := line*
//! line     := blank | comment | section | entry
//! comment  := ('#' | ';') any*
//! section  := '[' ("loss" | "train" | "data" | "eval") ']'
//! entry    := key '=' value          (whitespace around both is trimmed)
//! ```
//!
//! Entries must follow a section header. Values are typed per key: integers,
//! floats, `true`/`false`, a name, a comma list (`hidden = 64,64,64`), or
//! `none` for optional values. Unknown sections, unknown keys, duplicate keys
//! and ill-typed values are errors that name the line and key.
//!
//! `[loss] variant` picks the variant defaults first; every other key then
//! overrides them, regardless of order in the file. Command-line overrides
//! (`--key=value` or `--key value`) accept `section.key` or a bare key; a
//! bare key that exists in several sections resolves in the order
//! train, loss, data, eval.
//!
//! [`RunConfig::to_ini`] writes every key, and parsing that text yields the
//! identical configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_csv, load_idx, Dataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, DEFAULT_K};
use crate::losses::{LossConfig, LossVariant};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Blobs,
    Moons,
    Rings,
    Csv,
    Idx,
}

impl DataKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blobs" => Some(Self::Blobs),
            "moons" => Some(Self::Moons),
            "rings" => Some(Self::Rings),
            "csv" => Some(Self::Csv),
            "idx" => Some(Self::Idx),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Blobs => "blobs",
            Self::Moons => "moons",
            Self::Rings => "rings",
            Self::Csv => "csv",
            Self::Idx => "idx",
        }
    }

    fn synthetic(self) -> Option<SyntheticKind> {
        match self {
            Self::Blobs => Some(SyntheticKind::Blobs),
            Self::Moons => Some(SyntheticKind::Moons),
            Self::Rings => Some(SyntheticKind::Rings),
            Self::Csv | Self::Idx => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub seed: u64,
    /// CSV file, or the IDX image file.
    pub path: Option<String>,
    /// IDX label file.
    pub labels_path: Option<String>,
    /// Held-out share used for evaluation.
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Blobs,
            classes: 4,
            samples_per_class: 128,
            dim: 16,
            seed: 0,
            path: None,
            labels_path: None,
            test_fraction: 0.25,
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn load_full(&self) -> Result<Dataset> {
        match self.kind {
            DataKind::Csv => {
                let p = self.path.as_ref().ok_or_else(|| Error::Config("data.path is required for kind = csv".into()))?;
                load_csv(p)
            }
            DataKind::Idx => {
                let p = self.path.as_ref().ok_or_else(|| Error::Config("data.path is required for kind = idx".into()))?;
                let l = self
                    .labels_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.labels_path is required for kind = idx".into()))?;
                load_idx(p, l)
            }
            k => gen_synthetic(
                k.synthetic().expect("synthetic kind"),
                self.classes,
                self.samples_per_class,
                self.dim,
                self.seed,
            ),
        }
    }

    /// `(train, test)` split of the configured dataset.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let full = self.load_full()?;
        Ok(full.split(self.test_fraction, self.split_seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

const SECTIONS: [&str; 4] = ["train", "loss", "data", "eval"];

const KEYS: &[(&str, &str)] = &[
    ("loss", "variant"),
    ("loss", "temperature"),
    ("loss", "gamma"),
    ("loss", "whitening"),
    ("loss", "epsilon_scale"),
    ("loss", "sigma_stop_grad"),
    ("loss", "normalize_whitened"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "base_lr"),
    ("train", "momentum"),
    ("train", "weight_decay"),
    ("train", "warmup_epochs"),
    ("train", "ema_enabled"),
    ("train", "ema_m"),
    ("train", "seed"),
    ("train", "eval_every"),
    ("train", "lr_batch_scaling"),
    ("train", "hidden"),
    ("train", "embed_dim"),
    ("train", "standardize_hidden"),
    ("train", "prefetch"),
    ("train", "record_wall_time"),
    ("train", "noise_sigma"),
    ("train", "mask_prob"),
    ("train", "scale_min"),
    ("train", "scale_max"),
    ("data", "kind"),
    ("data", "classes"),
    ("data", "samples_per_class"),
    ("data", "dim"),
    ("data", "seed"),
    ("data", "path"),
    ("data", "labels_path"),
    ("data", "test_fraction"),
    ("data", "split_seed"),
    ("eval", "k"),
    ("eval", "probe_epochs"),
    ("eval", "probe_lr"),
    ("eval", "probe_standardize"),
];

/// Where a value came from, for diagnostics.
#[derive(Debug, Clone)]
enum Origin {
    Line(usize),
    Override,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Override => write!(f, "command-line override"),
        }
    }
}

type Entries = BTreeMap<(String, String), (String, Origin)>;

fn known(section: &str, key: &str) -> bool {
    KEYS.iter().any(|(s, k)| *s == section && *k == key)
}

fn lex(text: &str) -> Result<Entries> {
    let mut entries = Entries::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {n}: unterminated section header {line:?}")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::Config(format!("line {n}: unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`, found {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section
            .as_ref()
            .ok_or_else(|| Error::Config(format!("line {n}: key `{key}` appears before any section")))?;
        if !known(sec, key) {
            return Err(Error::Config(format!("line {n}: unknown key `{key}` in [{sec}]")));
        }
        let slot = (sec.clone(), key.to_string());
        if let Some((_, prev)) = entries.get(&slot) {
            return Err(Error::Config(format!("line {n}: key `{sec}.{key}` already set at {prev}")));
        }
        entries.insert(slot, (value.to_string(), Origin::Line(n)));
    }
    Ok(entries)
}

/// Resolves an override key to `(section, key)`.
fn resolve_key(key: &str) -> Result<(String, String)> {
    if let Some((s, k)) = key.split_once('.') {
        if known(s, k) {
            return Ok((s.to_string(), k.to_string()));
        }
        return Err(Error::Config(format!("override: unknown key `{key}`")));
    }
    SECTIONS
        .iter()
        .find(|s| known(s, key))
        .map(|s| (s.to_string(), key.to_string()))
        .ok_or_else(|| Error::Config(format!("override: unknown key `{key}`")))
}

/// Splits raw `--key=value` / `--key value` arguments into pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let body = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("override {a:?} must look like --key=value")))?;
        if let Some((k, v)) = body.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
            i += 1;
        } else {
            let v = args
                .get(i + 1)
                .ok_or_else(|| Error::Config(format!("override --{body} is missing a value")))?;
            out.push((body.replace('-', "_"), v.clone()));
            i += 2;
        }
    }
    Ok(out)
}

struct Typed<'a> {
    entries: &'a Entries,
}

impl Typed<'_> {
    fn raw(&self, s: &str, k: &str) -> Option<&(String, Origin)> {
        self.entries.get(&(s.to_string(), k.to_string()))
    }

    fn bad(s: &str, k: &str, origin: &Origin, v: &str, what: &str) -> Error {
        Error::Config(format!("{origin}: key `{s}.{k}`: expected {what}, found {v:?}"))
    }

    fn get<T: std::str::FromStr>(&self, s: &str, k: &str, what: &str, slot: &mut T) -> Result<()> {
        if let Some((v, o)) = self.raw(s, k) {
            *slot = v.parse().map_err(|_| Self::bad(s, k, o, v, what))?;
        }
        Ok(())
    }

    fn float(&self, s: &str, k: &str, slot: &mut f64) -> Result<()> {
        if let Some((v, o)) = self.raw(s, k) {
            let x: f64 = v.parse().map_err(|_| Self::bad(s, k, o, v, "a number"))?;
            if !x.is_finite() {
                return Err(Self::bad(s, k, o, v, "a finite number"));
            }
            *slot = x;
        }
        Ok(())
    }

    fn opt_string(&self, s: &str, k: &str, slot: &mut Option<String>) {
        if let Some((v, _)) = self.raw(s, k) {
            *slot = if v == "none" || v.is_empty() { None } else { Some(v.clone()) };
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = lex(text)?;
        for (k, v) in overrides {
            let slot = resolve_key(k)?;
            entries.insert(slot, (v.clone(), Origin::Override));
        }
        let t = Typed { entries: &entries };

        let variant = match t.raw("loss", "variant") {
            Some((v, o)) => LossVariant::parse(v).ok_or_else(|| {
                Error::Config(format!(
                    "{o}: key `loss.variant`: unknown variant {v:?} (expected simaffinity, simwhitening, simtrace or infonce)"
                ))
            })?,
            None => LossVariant::SimAffinity,
        };
        let mut loss = LossConfig::for_variant(variant);
        if let Some((v, o)) = t.raw("loss", "temperature") {
            loss.temperature = if v == "none" {
                None
            } else {
                let x: f64 = v.parse().map_err(|_| Typed::bad("loss", "temperature", o, v, "a number or none"))?;
                if !(x > 0.0 && x.is_finite()) {
                    return Err(Typed::bad("loss", "temperature", o, v, "a positive number or none"));
                }
                Some(x)
            };
        }
        t.float("loss", "gamma", &mut loss.gamma)?;
        t.get("loss", "whitening", "true or false", &mut loss.whitening)?;
        t.float("loss", "epsilon_scale", &mut loss.epsilon_scale)?;
        t.get("loss", "sigma_stop_grad", "true or false", &mut loss.sigma_stop_grad)?;
        t.get("loss", "normalize_whitened", "true or false", &mut loss.normalize_whitened)?;

        let mut train = TrainConfig {
            loss,
            ..TrainConfig::default()
        };
        t.get("train", "epochs", "a non-negative integer", &mut train.epochs)?;
        t.get("train", "batch_size", "a non-negative integer", &mut train.batch_size)?;
        t.float("train", "base_lr", &mut train.base_lr)?;
        t.float("train", "momentum", &mut train.momentum)?;
        t.float("train", "weight_decay", &mut train.weight_decay)?;
        t.get("train", "warmup_epochs", "a non-negative integer", &mut train.warmup_epochs)?;
        t.get("train", "ema_enabled", "true or false", &mut train.ema_enabled)?;
        t.float("train", "ema_m", &mut train.ema_m)?;
        t.get("train", "seed", "a non-negative integer", &mut train.seed)?;
        t.get("train", "eval_every", "a non-negative integer", &mut train.eval_every)?;
        t.get("train", "lr_batch_scaling", "true or false", &mut train.lr_batch_scaling)?;
        if let Some((v, o)) = t.raw("train", "hidden") {
            train.hidden = if v == "none" || v.is_empty() {
                Vec::new()
            } else {
                v.split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Typed::bad("train", "hidden", o, v, "a comma list of widths or none"))?
            };
        }
        t.get("train", "embed_dim", "a positive integer", &mut train.embed_dim)?;
        t.get("train", "standardize_hidden", "true or false", &mut train.standardize_hidden)?;
        t.get("train", "prefetch", "true or false", &mut train.prefetch)?;
        t.get("train", "record_wall_time", "true or false", &mut train.record_wall_time)?;
        t.float("train", "noise_sigma", &mut train.augment.noise_sigma)?;
        t.float("train", "mask_prob", &mut train.augment.mask_prob)?;
        t.float("train", "scale_min", &mut train.augment.scale_range.0)?;
        t.float("train", "scale_max", &mut train.augment.scale_range.1)?;

        let mut data = DataConfig::default();
        if let Some((v, o)) = t.raw("data", "kind") {
            data.kind = DataKind::parse(v)
                .ok_or_else(|| Typed::bad("data", "kind", o, v, "blobs, moons, rings, csv or idx"))?;
        }
        t.get("data", "classes", "a positive integer", &mut data.classes)?;
        t.get("data", "samples_per_class", "a positive integer", &mut data.samples_per_class)?;
        t.get("data", "dim", "a positive integer", &mut data.dim)?;
        t.get("data", "seed", "a non-negative integer", &mut data.seed)?;
        t.opt_string("data", "path", &mut data.path);
        t.opt_string("data", "labels_path", &mut data.labels_path);
        t.float("data", "test_fraction", &mut data.test_fraction)?;
        t.get("data", "split_seed", "a non-negative integer", &mut data.split_seed)?;
        if !(0.0..1.0).contains(&data.test_fraction) {
            return Err(Error::Config(format!(
                "key `data.test_fraction`: must be in [0, 1), got {}",
                data.test_fraction
            )));
        }

        let mut eval = EvalConfig::default();
        t.get("eval", "k", "a positive integer", &mut eval.k)?;
        t.get("eval", "probe_epochs", "a non-negative integer", &mut eval.probe.epochs)?;
        t.float("eval", "probe_lr", &mut eval.probe.lr)?;
        t.get("eval", "probe_standardize", "true or false", &mut eval.probe.standardize)?;
        if eval.k == 0 {
            return Err(Error::Config("key `eval.k`: must be >= 1".into()));
        }

        train.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })?;
        Ok(RunConfig { train, data, eval })
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_overrides(&text, overrides)
    }

    /// A file path, or else the name of a built-in configuration.
    pub fn load_named(name: &str, overrides: &[(String, String)]) -> Result<Self> {
        let p = Path::new(name);
        if p.exists() {
            return Self::load(p, overrides);
        }
        match builtin(name) {
            Some(text) => Self::parse_with_overrides(&text, overrides),
            None => Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or built-in config"),
            )),
        }
    }

    pub fn to_ini(&self) -> String {
        let l = &self.train.loss;
        let t = &self.train;
        let d = &self.data;
        let e = &self.eval;
        let opt = |o: &Option<String>| o.clone().unwrap_or_else(|| "none".into());
        let hidden = if t.hidden.is_empty() {
            "none".to_string()
        } else {
            t.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
        };
        format!(
            "[loss]\nvariant = {}\ntemperature = {}\ngamma = {}\nwhitening = {}\nepsilon_scale = {}\nsigma_stop_grad = {}\nnormalize_whitened = {}\n\n\
             [train]\nepochs = {}\nbatch_size = {}\nbase_lr = {}\nmomentum = {}\nweight_decay = {}\nwarmup_epochs = {}\nema_enabled = {}\nema_m = {}\nseed = {}\neval_every = {}\nlr_batch_scaling = {}\nhidden = {}\nembed_dim = {}\nstandardize_hidden = {}\nprefetch = {}\nrecord_wall_time = {}\nnoise_sigma = {}\nmask_prob = {}\nscale_min = {}\nscale_max = {}\n\n\
             [data]\nkind = {}\nclasses = {}\nsamples_per_class = {}\ndim = {}\nseed = {}\npath = {}\nlabels_path = {}\ntest_fraction = {}\nsplit_seed = {}\n\n\
             [eval]\nk = {}\nprobe_epochs = {}\nprobe_lr = {}\nprobe_standardize = {}\n",
            l.variant.name(),
            l.temperature.map_or("none".to_string(), |x| x.to_string()),
            l.gamma,
            l.whitening,
            l.epsilon_scale,
            l.sigma_stop_grad,
            l.normalize_whitened,
            t.epochs,
            t.batch_size,
            t.base_lr,
            t.momentum,
            t.weight_decay,
            t.warmup_epochs,
            t.ema_enabled,
            t.ema_m,
            t.seed,
            t.eval_every,
            t.lr_batch_scaling,
            hidden,
            t.embed_dim,
            t.standardize_hidden,
            t.prefetch,
            t.record_wall_time,
            t.augment.noise_sigma,
            t.augment.mask_prob,
            t.augment.scale_range.0,
            t.augment.scale_range.1,
            d.kind.name(),
            d.classes,
            d.samples_per_class,
            d.dim,
            d.seed,
            opt(&d.path),
            opt(&d.labels_path),
            d.test_fraction,
            d.split_seed,
            e.k,
            e.probe.epochs,
            e.probe.lr,
            e.probe.standardize,
        )
    }
}

/// Built-in configurations, selectable by name wherever a config path is
/// accepted.
pub const BUILTIN_NAMES: [&str; 5] = [
    "blobs_simaffinity",
    "blobs_simwhitening",
    "blobs_simtrace",
    "blobs_infonce",
    "moons_simaffinity",
];

pub fn builtin(name: &str) -> Option<String> {
    let (data, variant) = name.split_once('_')?;
    if !BUILTIN_NAMES.contains(&name) {
        return None;
    }
    let data = match data {
        "blobs" => "kind = blobs\nclasses = 4\nsamples_per_class = 128\ndim = 16\n",
        _ => "kind = moons\nclasses = 2\nsamples_per_class = 256\ndim = 8\n",
    };
    Some(format!(
        "[loss]\nvariant = {variant}\n\n[train]\nepochs = 30\nbatch_size = 64\nbase_lr = 0.05\nembed_dim = 16\n\n[data]\n{data}"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::parse(&c.to_ini()).unwrap());
        assert_eq!(c.train.loss.variant, LossVariant::SimAffinity);
    }

    #[test]
    fn variant_defaults_then_keys() {
        let c = RunConfig::parse("[loss]\ngamma = 0\nvariant = simtrace\n").unwrap();
        assert_eq!(c.train.loss.variant, LossVariant::SimTrace);
        assert_eq!(c.train.loss.temperature, None);
        assert!(c.train.loss.whitening);
    }

    #[test]
    fn unknown_variant_names_key_and_line() {
        let e = RunConfig::parse("[loss]\n\nvariant = simfoo\n").unwrap_err().to_string();
        assert!(e.contains("loss.variant") && e.contains("line 3"), "{e}");
    }

    #[test]
    fn structural_errors() {
        for (text, needle) in [
            ("epochs = 3\n", "before any section"),
            ("[nope]\n", "unknown section"),
            ("[train]\nepochz = 3\n", "epochz"),
            ("[train]\nepochs = 3\nepochs = 4\n", "already set"),
            ("[train]\nepochs = x\n", "train.epochs"),
            ("[train\n", "unterminated"),
            ("[train]\njunk\n", "key = value"),
        ] {
            let e = RunConfig::parse(text).unwrap_err().to_string();
            assert!(e.contains(needle), "{text:?}: {e}");
        }
    }

    #[test]
    fn overrides_apply() {
        let args: Vec<String> = ["--epochs", "1", "--loss.gamma=0", "--seed=7"].iter().map(|s| s.to_string()).collect();
        let o = parse_override_args(&args).unwrap();
        let c = RunConfig::parse_with_overrides("[train]\nepochs = 5\n", &o).unwrap();
        assert_eq!(c.train.epochs, 1);
        assert_eq!(c.train.loss.gamma, 0.0);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.data.seed, 0);
        assert!(parse_override_args(&["--epochs".to_string()]).is_err());
        assert!(RunConfig::parse_with_overrides("", &[("bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn builtins_parse_and_round_trip() {
        for name in BUILTIN_NAMES {
            let c = RunConfig::parse(&builtin(name).unwrap()).unwrap();
            assert_eq!(c, RunConfig::parse(&c.to_ini()).unwrap(), "{name}");
        }
    }

    #[test]
    fn invalid_combination_is_config_error() {
        let e = RunConfig::parse("[loss]\nvariant = simtrace\ngamma = 0.5\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
