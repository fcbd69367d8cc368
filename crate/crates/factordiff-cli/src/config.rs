//! Run configuration: a TOML document with one section per module, every
//! field defaulted, unknown keys rejected with the offending line, and a
//! `FACTORDIFF_<SECTION>_<KEY>` environment override for any key.
//!
//! Precedence: command-line flags > environment > config file > defaults.

use std::path::Path;

use factordiff::datasets::{GlobalSceneConfig, ShapeKind, SpriteSceneConfig};
use factordiff::networks::{CondMode, DenoiserConfig, EncoderConfig, Predict};
use factordiff::sampling::{Reduction, SamplerConfig, SamplerKind};
use factordiff::schedule::{NoiseSchedule, ScheduleKind};
use factordiff::training::TrainConfig;
use factordiff::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "FACTORDIFF_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for every derived rng. Mandatory: must come from the config
    /// file, `FACTORDIFF_SEED`, or `--seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "sprites" or "global".
    pub kind: String,
    /// Number of images to generate.
    pub n: usize,
    pub resolution: usize,
    pub num_sprites: usize,
    pub shapes: Vec<String>,
    pub min_separation: f32,
    pub lighting_levels: u32,
    pub background_levels: u32,
    pub object_levels: u32,
    pub position_levels: u32,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let sprites = SpriteSceneConfig::default();
        let global = GlobalSceneConfig::default();
        DatasetSection {
            kind: "sprites".into(),
            n: 512,
            resolution: sprites.resolution,
            num_sprites: sprites.num_sprites,
            shapes: sprites.shapes.iter().map(|s| s.as_str().into()).collect(),
            min_separation: sprites.min_separation,
            lighting_levels: global.lighting_levels,
            background_levels: global.background_levels,
            object_levels: global.object_levels,
            position_levels: global.position_levels,
        }
    }
}

impl DatasetSection {
    pub fn sprite_config(&self) -> Result<SpriteSceneConfig> {
        let shapes = self
            .shapes
            .iter()
            .map(|s| {
                ShapeKind::parse(s)
                    .ok_or_else(|| Error::Config(format!("unknown sprite shape {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpriteSceneConfig {
            resolution: self.resolution,
            num_sprites: self.num_sprites,
            shapes,
            min_separation: self.min_separation,
            ..SpriteSceneConfig::default()
        })
    }

    pub fn global_config(&self) -> Result<GlobalSceneConfig> {
        Ok(GlobalSceneConfig {
            resolution: self.resolution,
            lighting_levels: self.lighting_levels,
            background_levels: self.background_levels,
            object_levels: self.object_levels,
            position_levels: self.position_levels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Number of latent components.
    pub k: usize,
    /// Dimension of each component.
    pub d: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Defaults to `d` when absent, which the conditioning mode requires.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_embed_dim: Option<usize>,
    pub cond_mode: String,
    /// "x0" or "eps".
    pub predict: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            k: 2,
            d: 16,
            hidden_dim: 32,
            num_blocks: 2,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            time_embed_dim: None,
            cond_mode: CondMode::ConcatTimeLatent.as_str().into(),
            predict: Predict::X0.as_str().into(),
        }
    }
}

impl ModelSection {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: self.hidden_dim,
            num_blocks: self.num_blocks,
            k: self.k,
            d: self.d,
        }
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        Ok(DenoiserConfig {
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            time_embed_dim: self.time_embed_dim.unwrap_or(self.d),
            cond_mode: CondMode::parse(&self.cond_mode)?,
            predict: Predict::parse(&self.predict)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: String,
    pub t_max: usize,
    pub s_offset: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::SquaredCosine.as_str().into(),
            t_max: 1000,
            s_offset: factordiff::schedule::DEFAULT_S_OFFSET,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(ScheduleKind::parse(&self.kind)?, self.t_max, self.s_offset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    /// "mean" or "sum".
    pub reduction: String,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            lr: t.lr,
            steps: t.steps,
            reduction: t.reduction.as_str().into(),
            checkpoint_every: t.checkpoint_every,
        }
    }
}

impl TrainSection {
    /// The training module validates predict against the model, so it is
    /// taken from the model section rather than duplicated here.
    pub fn build(&self, predict: Predict, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            steps: self.steps,
            reduction: Reduction::parse(&self.reduction)?,
            predict,
            seed,
            checkpoint_every: self.checkpoint_every,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// "ddim" or "ancestral_alg2".
    pub kind: String,
    pub num_steps: usize,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SamplerSection {
            kind: s.kind.as_str().into(),
            num_steps: s.num_steps,
            gamma: s.gamma,
            eta: s.eta,
        }
    }
}

impl SamplerSection {
    pub fn build(&self, seed: u64) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            kind: SamplerKind::parse(&self.kind)?,
            num_steps: self.num_steps,
            gamma: self.gamma,
            eta: self.eta,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out images to reconstruct when computing pixel metrics.
    pub images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { images: 16 }
    }
}

impl RunConfig {
    /// Load the file (or defaults when `path` is None), apply environment
    /// overrides, then the seed flag. The result still carries `seed: None`
    /// if no layer provided one; [`RunConfig::seed`] rejects that.
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Self::parse(&text)?
            }
            None => RunConfig::default(),
        };
        let vars: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        cfg.apply_env(&vars)?;
        if let Some(s) = seed_flag {
            cfg.seed = Some(s);
        }
        Ok(cfg)
    }

    /// Parse a TOML document; unknown keys are rejected with their line.
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(flatten_toml_error(&e)))
    }

    /// Resolved base seed.
    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Config(
                "seed is mandatory: set `seed` in the config file, FACTORDIFF_SEED, or --seed"
                    .into(),
            )
        })
    }

    /// Effective post-default document, with every resolvable default
    /// materialized, for echoing into output directories.
    pub fn effective(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.model.time_embed_dim = Some(cfg.model.time_embed_dim.unwrap_or(cfg.model.d));
        cfg
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `FACTORDIFF_<SECTION>_<KEY>` (or `FACTORDIFF_SEED`) overrides.
    /// Section names contain no underscores, so the first underscore after
    /// the prefix splits section from key.
    fn apply_env(&mut self, vars: &[(String, String)]) -> Result<()> {
        let mut sorted: Vec<&(String, String)> = vars.iter().collect();
        sorted.sort();
        for (name, value) in sorted {
            let rest = &name[ENV_PREFIX.len()..];
            if rest == "SEED" {
                self.seed = Some(parse_env(name, value)?);
                continue;
            }
            let (section, key) = rest.split_once('_').ok_or_else(|| {
                Error::Config(format!("{name} does not name a config section and key"))
            })?;
            let section = section.to_ascii_lowercase();
            let key = key.to_ascii_lowercase();
            self.apply_one(name, &section, &key, value)?;
        }
        Ok(())
    }

    fn apply_one(&mut self, name: &str, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("dataset", "kind") => self.dataset.kind = value.into(),
            ("dataset", "n") => self.dataset.n = parse_env(name, value)?,
            ("dataset", "resolution") => self.dataset.resolution = parse_env(name, value)?,
            ("dataset", "num_sprites") => self.dataset.num_sprites = parse_env(name, value)?,
            ("dataset", "shapes") => self.dataset.shapes = parse_env_list(value),
            ("dataset", "min_separation") => {
                self.dataset.min_separation = parse_env(name, value)?
            }
            ("dataset", "lighting_levels") => {
                self.dataset.lighting_levels = parse_env(name, value)?
            }
            ("dataset", "background_levels") => {
                self.dataset.background_levels = parse_env(name, value)?
            }
            ("dataset", "object_levels") => self.dataset.object_levels = parse_env(name, value)?,
            ("dataset", "position_levels") => {
                self.dataset.position_levels = parse_env(name, value)?
            }
            ("model", "k") => self.model.k = parse_env(name, value)?,
            ("model", "d") => self.model.d = parse_env(name, value)?,
            ("model", "hidden_dim") => self.model.hidden_dim = parse_env(name, value)?,
            ("model", "num_blocks") => self.model.num_blocks = parse_env(name, value)?,
            ("model", "base_channels") => self.model.base_channels = parse_env(name, value)?,
            ("model", "channel_multipliers") => {
                self.model.channel_multipliers = parse_env_num_list(name, value)?
            }
            ("model", "time_embed_dim") => {
                self.model.time_embed_dim = Some(parse_env(name, value)?)
            }
            ("model", "cond_mode") => self.model.cond_mode = value.into(),
            ("model", "predict") => self.model.predict = value.into(),
            ("schedule", "kind") => self.schedule.kind = value.into(),
            ("schedule", "t_max") => self.schedule.t_max = parse_env(name, value)?,
            ("schedule", "s_offset") => self.schedule.s_offset = parse_env(name, value)?,
            ("train", "batch_size") => self.train.batch_size = parse_env(name, value)?,
            ("train", "lr") => self.train.lr = parse_env(name, value)?,
            ("train", "steps") => self.train.steps = parse_env(name, value)?,
            ("train", "reduction") => self.train.reduction = value.into(),
            ("train", "checkpoint_every") => {
                self.train.checkpoint_every = parse_env(name, value)?
            }
            ("sampler", "kind") => self.sampler.kind = value.into(),
            ("sampler", "num_steps") => self.sampler.num_steps = parse_env(name, value)?,
            ("sampler", "gamma") => self.sampler.gamma = parse_env(name, value)?,
            ("sampler", "eta") => self.sampler.eta = parse_env(name, value)?,
            ("eval", "images") => self.eval.images = parse_env(name, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "{name} does not match any config key (section [{section}], key {key:?})"
                )))
            }
        }
        Ok(())
    }
}

fn parse_env<T: std::str::FromStr>(name: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| {
        Error::Config(format!("{name}={value:?} is not a valid value: {e}"))
    })
}

/// Comma-separated list, with optional brackets and quotes.
fn parse_env_list(value: &str) -> Vec<String> {
    value
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| s.trim().trim_matches('"').trim_matches('\'').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_env_num_list(name: &str, value: &str) -> Result<Vec<usize>> {
    parse_env_list(value)
        .iter()
        .map(|s| parse_env(name, s))
        .collect()
}

/// The toml error Display is multi-line with a caret pointing at the
/// offending span; collapse it to one line, keeping the location.
pub(crate) fn flatten_toml_error(e: &toml::de::Error) -> String {
    let text = e.to_string();
    let mut location = String::new();
    let mut message = String::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('|') || line.chars().all(|c| c == '^') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("TOML parse error ") {
            location = rest.trim_end_matches(',').to_string();
        } else if message.is_empty() && !line.starts_with(char::is_numeric) {
            message = line.to_string();
        }
    }
    if message.is_empty() {
        message = text.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    if location.is_empty() {
        message
    } else {
        format!("{message} ({location})")
    }
}
