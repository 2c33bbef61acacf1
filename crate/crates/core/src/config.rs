//! Experiment configuration: a flat `key = value` text format with `#`
//! comments and dotted keys for per-site entries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::anchorbank::{AnchorMatching, DEFAULT_OMEGA, MAX_ONE_TO_ONE};
use crate::error::{Error, Result};
use crate::fedcore::{EtaRule, DEFAULT_LAMBDA};
use crate::synthdata::{default_contrast, default_site_plan, DataParams, ModalityId, SampleRequest, SiteRequest};
use crate::toymodel::Arch;

/// One problem found while reading or validating a config. `line` and
/// `column` are 1-based; 0 means the value came from a default.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub column: usize,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}: {}", self.key, self.message)
        } else {
            write!(f, "line {}, column {}: {}: {}", self.line, self.column, self.key, self.message)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Fedmepd,
    Fedavg,
    Local,
    FullyPersonalized,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Fedmepd, Mode::Fedavg, Mode::Local, Mode::FullyPersonalized];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fedmepd => "fedmepd",
            Mode::Fedavg => "fedavg",
            Mode::Local => "local",
            Mode::FullyPersonalized => "fully_personalized",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected fedmepd, fedavg, local or fully_personalized)"))
    }
}

/// What a mode actually switches on or off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeSettings {
    /// Clients receive server parameters and report back.
    pub communicate: bool,
    /// Clients calibrate decoder inputs against the anchor bank.
    pub use_lacca: bool,
    pub eta: EtaRule,
    pub lambda_base: f64,
    pub patience: u32,
    /// Whether the personalization mask evolves; otherwise it stays at its initial value.
    pub update_mask: bool,
    pub initial_mask_bit: u8,
}

/// Sizes of the synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub noise: f64,
    /// Samples per site when no explicit site plan is given.
    pub samples_per_site: usize,
    /// Strength of the per-client acquisition shift.
    pub site_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            n_classes: 4,
            noise: 0.05,
            samples_per_site: 10,
            site_jitter: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u64,
    pub epochs_per_round: usize,
    /// Server epochs before the first round (anchor initialization uses this model).
    pub initial_server_epochs: usize,
    pub patience: u32,
    pub lambda_base: f64,
    pub omega: f64,
    pub anchors_per_class: usize,
    /// 1-based; `None` means the deepest level.
    pub membership_level: Option<usize>,
    pub anchor_matching: AnchorMatching,
    pub n_heads: usize,
    pub channels: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub mode: Mode,
    /// Put the calibration projections under the mask machinery too.
    pub lacca_federated: bool,
    /// Run client updates on scoped threads.
    pub parallel: bool,
    pub data: DataConfig,
    /// Explicit site plan; `None` uses the default nine-site layout.
    pub sites: Option<Vec<SiteRequest>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 1000,
            epochs_per_round: 1,
            initial_server_epochs: 1,
            patience: 10,
            lambda_base: DEFAULT_LAMBDA,
            omega: DEFAULT_OMEGA,
            anchors_per_class: 4,
            membership_level: None,
            anchor_matching: AnchorMatching::Nearest,
            n_heads: 8,
            channels: vec![8, 16],
            lr: 2e-4,
            weight_decay: 1e-5,
            mode: Mode::Fedmepd,
            lacca_federated: false,
            parallel: true,
            data: DataConfig::default(),
            sites: None,
        }
    }
}

/// The desk preset shipped as `configs/desk.cfg`.
pub const DESK_CONFIG: &str = include_str!("../../../configs/desk.cfg");

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| format!("cannot parse list element {:?}", s.trim()))
        })
        .collect()
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

fn parse_num<T: FromStr>(value: &str, what: &str) -> std::result::Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("expected {what}, got {value:?}"))
}

/// Integers that must be non-negative; negative input is a range error, not a syntax error.
fn parse_count<T: TryFrom<i64>>(value: &str) -> std::result::Result<T, String> {
    let v: i64 = parse_num(value, "an integer")?;
    if v < 0 {
        return Err(format!("must be >= 0, got {v}"));
    }
    T::try_from(v).map_err(|_| format!("{v} is out of range"))
}

fn parse_matching(value: &str) -> std::result::Result<AnchorMatching, String> {
    match value {
        "nearest" => Ok(AnchorMatching::Nearest),
        "one_to_one" => Ok(AnchorMatching::OneToOne),
        _ => Err(format!("expected nearest or one_to_one, got {value:?}")),
    }
}

fn matching_name(m: AnchorMatching) -> &'static str {
    match m {
        AnchorMatching::Nearest => "nearest",
        AnchorMatching::OneToOne => "one_to_one",
    }
}

#[derive(Default)]
struct SiteEntry {
    modalities: Option<Vec<ModalityId>>,
    samples: Option<SampleRequest>,
    line: usize,
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// The desk preset.
    pub fn desk() -> Self {
        Self::parse(DESK_CONFIG).expect("shipped desk config is valid")
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Checks ranges and cross-field constraints of an already-built config.
    pub fn validate(&self) -> Result<()> {
        let errors = self.validation_errors(&BTreeMap::new());
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Parses and validates `text`; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut sites: BTreeMap<usize, SiteEntry> = BTreeMap::new();

        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let body = raw.split('#').next().unwrap_or("");
            if body.trim().is_empty() {
                continue;
            }
            let key_col = body.len() - body.trim_start().len() + 1;
            let Some(eq) = body.find('=') else {
                errors.push(ConfigError {
                    line,
                    column: key_col,
                    key: body.trim().to_string(),
                    message: "expected `key = value`".into(),
                });
                continue;
            };
            let key = body[..eq].trim().to_string();
            let value_part = &body[eq + 1..];
            let value = value_part.trim();
            let value_col = eq + 2 + (value_part.len() - value_part.trim_start().len());
            let err = |message: String, column: usize| ConfigError {
                line,
                column,
                key: key.clone(),
                message,
            };
            if let Some(prev) = seen.insert(key.clone(), line) {
                errors.push(err(format!("duplicate key (first set on line {prev})"), key_col));
                continue;
            }
            match cfg.set(&key, value, line, &mut sites) {
                Ok(()) => {}
                Err(SetError::UnknownKey) => errors.push(err("unknown key".into(), key_col)),
                Err(SetError::Value(m)) => errors.push(err(m, value_col)),
            }
        }

        if !sites.is_empty() {
            let mut plan = Vec::new();
            for (expected, (idx, entry)) in sites.into_iter().enumerate() {
                let key = format!("sites.{idx}");
                if idx != expected {
                    errors.push(ConfigError {
                        line: entry.line,
                        column: 1,
                        key,
                        message: format!("site indices must be contiguous from 0; expected sites.{expected}"),
                    });
                    break;
                }
                let Some(modalities) = entry.modalities else {
                    errors.push(ConfigError {
                        line: entry.line,
                        column: 1,
                        key: format!("{key}.modalities"),
                        message: "missing".into(),
                    });
                    continue;
                };
                let samples = entry
                    .samples
                    .unwrap_or(SampleRequest::Count(cfg.data.samples_per_site));
                plan.push(SiteRequest { modalities, samples });
            }
            cfg.sites = Some(plan);
        }

        if errors.is_empty() {
            errors = cfg.validation_errors(&seen);
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    fn set(
        &mut self,
        key: &str,
        v: &str,
        line: usize,
        sites: &mut BTreeMap<usize, SiteEntry>,
    ) -> std::result::Result<(), SetError> {
        match key {
            "seed" => self.seed = parse_count(v)?,
            "rounds" => self.rounds = parse_count(v)?,
            "epochs_per_round" => self.epochs_per_round = parse_count(v)?,
            "initial_server_epochs" => self.initial_server_epochs = parse_count(v)?,
            "patience" => self.patience = parse_count(v)?,
            "lambda_base" => self.lambda_base = parse_num(v, "a number")?,
            "omega" => self.omega = parse_num(v, "a number")?,
            "anchors_per_class" => self.anchors_per_class = parse_count(v)?,
            "membership_level" => {
                self.membership_level = if v == "deepest" {
                    None
                } else {
                    Some(parse_count(v)?)
                }
            }
            "anchor_matching" => self.anchor_matching = parse_matching(v)?,
            "n_heads" => self.n_heads = parse_count(v)?,
            "channels" => self.channels = parse_list(v)?,
            "lr" => self.lr = parse_num(v, "a number")?,
            "weight_decay" => self.weight_decay = parse_num(v, "a number")?,
            "mode" => self.mode = v.parse()?,
            "lacca_federated" => self.lacca_federated = parse_bool(v)?,
            "parallel" => self.parallel = parse_bool(v)?,
            "data.height" => self.data.height = parse_count(v)?,
            "data.width" => self.data.width = parse_count(v)?,
            "data.n_classes" => self.data.n_classes = parse_count(v)?,
            "data.noise" => self.data.noise = parse_num(v, "a number")?,
            "data.samples_per_site" => self.data.samples_per_site = parse_count(v)?,
            "data.site_jitter" => self.data.site_jitter = parse_num(v, "a number")?,
            _ => {
                let parts: Vec<&str> = key.split('.').collect();
                let [ "sites", idx, field ] = parts.as_slice() else {
                    return Err(SetError::UnknownKey);
                };
                let Ok(idx) = idx.parse::<usize>() else {
                    return Err(SetError::UnknownKey);
                };
                let entry = sites.entry(idx).or_insert_with(|| SiteEntry {
                    line,
                    ..SiteEntry::default()
                });
                match *field {
                    "modalities" => {
                        let ids: Vec<u8> = parse_list(v)?;
                        entry.modalities = Some(ids.into_iter().map(ModalityId).collect());
                    }
                    "samples" => entry.samples = Some(SampleRequest::Count(parse_count(v)?)),
                    "indices" => entry.samples = Some(SampleRequest::Indices(parse_list(v)?)),
                    _ => return Err(SetError::UnknownKey),
                }
            }
        }
        Ok(())
    }

    fn validation_errors(&self, lines: &BTreeMap<String, usize>) -> Vec<ConfigError> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, key: &str, message: String| {
            if !ok {
                errors.push(ConfigError {
                    line: lines.get(key).copied().unwrap_or(0),
                    column: 1,
                    key: key.to_string(),
                    message,
                });
            }
        };
        check(
            (0.0..=1.0).contains(&self.lambda_base),
            "lambda_base",
            format!("must lie in [0, 1], got {}", self.lambda_base),
        );
        check(
            self.omega > 0.0 && self.omega < 1.0,
            "omega",
            format!("must lie in (0, 1), got {}", self.omega),
        );
        check(self.anchors_per_class >= 1, "anchors_per_class", "must be >= 1".into());
        check(
            self.anchor_matching == AnchorMatching::Nearest || self.anchors_per_class <= MAX_ONE_TO_ONE,
            "anchor_matching",
            format!("one_to_one supports at most {MAX_ONE_TO_ONE} anchors per class"),
        );
        check(!self.channels.is_empty(), "channels", "need at least one level".into());
        check(self.channels.iter().all(|&c| c > 0), "channels", "every width must be > 0".into());
        check(self.n_heads >= 1, "n_heads", "must be >= 1".into());
        check(
            self.n_heads == 0 || self.channels.iter().all(|c| c % self.n_heads == 0),
            "n_heads",
            format!("must divide every channel width {:?}", self.channels),
        );
        let levels = self.channels.len();
        if let Some(ml) = self.membership_level {
            check(
                ml >= 1 && ml <= levels,
                "membership_level",
                format!("must lie in 1..={levels}, got {ml}"),
            );
        }
        check(self.lr.is_finite() && self.lr >= 0.0, "lr", format!("must be finite and >= 0, got {}", self.lr));
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight_decay",
            format!("must be finite and >= 0, got {}", self.weight_decay),
        );
        check(
            self.data.noise.is_finite() && self.data.noise >= 0.0,
            "data.noise",
            format!("must be finite and >= 0, got {}", self.data.noise),
        );
        check(
            self.data.site_jitter.is_finite() && self.data.site_jitter >= 0.0,
            "data.site_jitter",
            format!("must be finite and >= 0, got {}", self.data.site_jitter),
        );
        let scale = 1usize << (levels.max(1) - 1);
        check(
            self.data.height >= 8 && self.data.height % scale == 0,
            "data.height",
            format!("must be >= 8 and divisible by {scale}"),
        );
        check(
            self.data.width >= 8 && self.data.width % scale == 0,
            "data.width",
            format!("must be >= 8 and divisible by {scale}"),
        );
        let n_mod = default_contrast().len();
        check(
            self.data.n_classes >= 2 && self.data.n_classes <= default_contrast()[0].len(),
            "data.n_classes",
            format!("must lie in 2..={}", default_contrast()[0].len()),
        );
        let plan = self.site_plan();
        check(plan.len() >= 2, "sites", "need a server and at least one client".into());
        for (i, site) in plan.iter().enumerate() {
            let key = format!("sites.{i}.modalities");
            let mut uniq = site.modalities.clone();
            uniq.sort();
            uniq.dedup();
            check(
                !site.modalities.is_empty() && uniq.len() == site.modalities.len(),
                &key,
                "must list distinct modalities".into(),
            );
            check(
                site.modalities.iter().all(|m| m.index() < n_mod),
                &key,
                format!("modality ids must be < {n_mod}"),
            );
            if i == 0 {
                check(uniq.len() == n_mod, &key, "site 0 is the server and must hold every modality".into());
            }
            let n = match &site.samples {
                SampleRequest::Count(n) => *n,
                SampleRequest::Indices(ix) => ix.len(),
            };
            check(n >= 5, &format!("sites.{i}.samples"), "need at least 5 samples per site".into());
        }
        errors
    }

    /// Site plan in effect.
    pub fn site_plan(&self) -> Vec<SiteRequest> {
        self.sites
            .clone()
            .unwrap_or_else(|| default_site_plan(self.data.samples_per_site))
    }

    pub fn data_params(&self) -> DataParams {
        DataParams {
            height: self.data.height,
            width: self.data.width,
            n_classes: self.data.n_classes,
            noise: self.data.noise,
            contrast: default_contrast()
                .into_iter()
                .map(|row| row[..self.data.n_classes.min(row.len())].to_vec())
                .collect(),
        }
    }

    pub fn arch(&self) -> Arch {
        Arch {
            n_modalities: default_contrast().len(),
            n_classes: self.data.n_classes,
            channels: self.channels.clone(),
            n_heads: self.n_heads,
        }
    }

    pub fn membership(&self) -> usize {
        self.membership_level.unwrap_or(self.channels.len())
    }

    pub fn settings(&self) -> ModeSettings {
        let base = ModeSettings {
            communicate: true,
            use_lacca: true,
            eta: EtaRule::InverseNorm,
            lambda_base: self.lambda_base,
            patience: self.patience,
            update_mask: true,
            initial_mask_bit: 1,
        };
        match self.mode {
            Mode::Fedmepd => base,
            Mode::FullyPersonalized => ModeSettings { patience: 0, ..base },
            Mode::Fedavg => ModeSettings {
                use_lacca: false,
                eta: EtaRule::Uniform,
                lambda_base: 0.0,
                update_mask: false,
                ..base
            },
            Mode::Local => ModeSettings {
                communicate: false,
                use_lacca: false,
                update_mask: false,
                initial_mask_bit: 0,
                ..base
            },
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("rounds", self.rounds.to_string());
        kv("epochs_per_round", self.epochs_per_round.to_string());
        kv("initial_server_epochs", self.initial_server_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("lambda_base", format!("{:?}", self.lambda_base));
        kv("omega", format!("{:?}", self.omega));
        kv("anchors_per_class", self.anchors_per_class.to_string());
        kv(
            "membership_level",
            self.membership_level.map_or("deepest".into(), |l| l.to_string()),
        );
        kv("anchor_matching", matching_name(self.anchor_matching).into());
        kv("n_heads", self.n_heads.to_string());
        kv("channels", join(&self.channels));
        kv("lr", format!("{:?}", self.lr));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("mode", self.mode.to_string());
        kv("lacca_federated", self.lacca_federated.to_string());
        kv("parallel", self.parallel.to_string());
        kv("data.height", self.data.height.to_string());
        kv("data.width", self.data.width.to_string());
        kv("data.n_classes", self.data.n_classes.to_string());
        kv("data.noise", format!("{:?}", self.data.noise));
        kv("data.samples_per_site", self.data.samples_per_site.to_string());
        kv("data.site_jitter", format!("{:?}", self.data.site_jitter));
        if let Some(sites) = &self.sites {
            for (i, s) in sites.iter().enumerate() {
                let ids: Vec<u8> = s.modalities.iter().map(|m| m.0).collect();
                kv(&format!("sites.{i}.modalities"), join(&ids));
                match &s.samples {
                    SampleRequest::Count(n) => kv(&format!("sites.{i}.samples"), n.to_string()),
                    SampleRequest::Indices(ix) => kv(&format!("sites.{i}.indices"), join(ix)),
                }
            }
        }
        out
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

enum SetError {
    UnknownKey,
    Value(String),
}

impl From<String> for SetError {
    fn from(m: String) -> Self {
        SetError::Value(m)
    }
}
