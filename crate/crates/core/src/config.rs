//! Flat `key=value` configuration.
//!
//! Keys are namespaced (`mcp.n_tokens`, `backbone.depth`, …). Blank lines and
//! lines starting with `#` are ignored; unknown keys are errors. The textual
//! snapshot produced by [`Config::to_text`] lists every key in a fixed order
//! and parses back to an identical config. A `preset` key (`default`,
//! `compact` or `desk`) resets every field and belongs on the first line.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryPolicy {
    /// Equal-interval sample over all tracked frames.
    Uniform,
    /// Insert every K-th frame, evict the oldest.
    FifoEveryK,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionBias {
    Alibi,
    None,
    /// Learned per-bank-slot embedding added to memory features.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlibiDistance {
    /// Frame position within the (sampled) bank.
    BankPosition,
    /// Difference of original video frame indices.
    FrameIndex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsfSource {
    /// Search-region slice of the final backbone output.
    FinalSearch,
    /// Search-region slice plus the pooled remainder of the final output.
    WholeSequence,
    /// Search-region slice of the module's own stage input.
    StageInput,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

keyword_enum!(MemoryPolicy { Uniform => "uniform", FifoEveryK => "fifo" });
keyword_enum!(PositionBias { Alibi => "alibi", None => "none", Absolute => "absolute" });
keyword_enum!(AlibiDistance { BankPosition => "bank", FrameIndex => "frame" });
keyword_enum!(DsfSource { FinalSearch => "final", WholeSequence => "sequence", StageInput => "stage" });

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub patch: usize,
    pub search_size: usize,
    pub template_size: usize,
    pub templates: usize,
    pub text_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// First layer of the span that fusion stages partition.
    pub fusion_start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McpConfig {
    pub enabled: bool,
    pub n_tokens: usize,
    pub bank_l: usize,
    pub policy: MemoryPolicy,
    pub fifo_k: usize,
    pub bias: PositionBias,
    pub distance: AlibiDistance,
    pub ffn_mult: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsfConfig {
    pub enabled: bool,
    pub count: usize,
    /// Inner width d_s; 0 means `2·d`.
    pub inner: usize,
    /// State width e.
    pub state: usize,
    pub conv_width: usize,
    /// Rank of the Δ′ bottleneck; 0 means `ceil(d / 16)`.
    pub dt_rank: usize,
    pub source: DsfSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    pub search_factor: f64,
    pub template_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub frame_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Number of synthetic training sequences.
    pub sequences: usize,
    pub seq_len: usize,
    /// Clip frames are `stride ∈ 1..=max_gap` apart.
    pub max_gap: usize,
    /// Search-crop center jitter, in target sizes.
    pub jitter_center: f64,
    /// Search-crop log-scale jitter.
    pub jitter_scale: f64,
    /// Back-propagate into clip-local memory features instead of detaching them.
    pub memory_backprop: bool,
    pub data_seed: u64,
}

/// Full model, tracking and training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub embed: EmbedConfig,
    pub backbone: BackboneConfig,
    pub mcp: McpConfig,
    pub dsf: DsfConfig,
    pub head: HeadConfig,
    pub track: TrackConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            embed: EmbedConfig {
                patch: 8,
                search_size: 64,
                template_size: 32,
                templates: 2,
                text_dim: 8,
            },
            backbone: BackboneConfig {
                depth: 8,
                d: 64,
                heads: 4,
                ffn_mult: 4,
                fusion_start: 0,
            },
            mcp: McpConfig {
                enabled: true,
                n_tokens: 16,
                bank_l: 50,
                policy: MemoryPolicy::Uniform,
                fifo_k: 5,
                bias: PositionBias::Alibi,
                distance: AlibiDistance::BankPosition,
                ffn_mult: 2,
            },
            dsf: DsfConfig {
                enabled: true,
                count: 4,
                inner: 0,
                state: 16,
                conv_width: 4,
                dt_rank: 0,
                source: DsfSource::FinalSearch,
            },
            head: HeadConfig { hidden: 64 },
            track: TrackConfig {
                search_factor: 4.0,
                template_factor: 2.0,
            },
            data: DataConfig { frame_size: 128 },
            train: TrainConfig {
                lr: 1e-3,
                steps: 2000,
                weight_decay: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                grad_clip: 1.0,
                sequences: 40,
                seq_len: 60,
                max_gap: 2,
                jitter_center: 0.25,
                jitter_scale: 0.1,
                memory_backprop: false,
                data_seed: 1000,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl Config {
    /// A much smaller model and frame size for CPU-bound experiments and the
    /// acceptance suite.
    pub fn compact() -> Self {
        let mut c = Self::default();
        c.embed.search_size = 32;
        c.embed.template_size = 16;
        c.backbone.depth = 4;
        c.backbone.d = 32;
        c.backbone.ffn_mult = 2;
        c.mcp.n_tokens = 8;
        c.dsf.state = 8;
        c.dsf.inner = 32;
        c.head.hidden = 32;
        c.data.frame_size = 64;
        c.train.seq_len = 40;
        c
    }

    /// The compact model with 4-pixel patches: a 8×8 search grid, which is
    /// what the tracker needs to localize on 64-pixel frames. Used for the
    /// acceptance suite and the CLI defaults.
    pub fn desk() -> Self {
        let mut c = Self::compact();
        c.embed.patch = 4;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "preset" => {
                *self = match v {
                    "default" => Self::default(),
                    "compact" => Self::compact(),
                    "desk" => Self::desk(),
                    _ => return Err(Error::Config(format!("unknown preset {v:?}"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "embed.patch" => self.embed.patch = parse(key, v)?,
            "embed.search_size" => self.embed.search_size = parse(key, v)?,
            "embed.template_size" => self.embed.template_size = parse(key, v)?,
            "embed.templates" => self.embed.templates = parse(key, v)?,
            "embed.text_dim" => self.embed.text_dim = parse(key, v)?,
            "backbone.depth" => self.backbone.depth = parse(key, v)?,
            "backbone.d" => self.backbone.d = parse(key, v)?,
            "backbone.heads" => self.backbone.heads = parse(key, v)?,
            "backbone.ffn_mult" => self.backbone.ffn_mult = parse(key, v)?,
            "backbone.fusion_start" => self.backbone.fusion_start = parse(key, v)?,
            "mcp.enabled" => self.mcp.enabled = parse_bool(key, v)?,
            "mcp.n_tokens" => self.mcp.n_tokens = parse(key, v)?,
            "mcp.bank_l" => self.mcp.bank_l = parse(key, v)?,
            "mcp.policy" => self.mcp.policy = v.parse()?,
            "mcp.fifo_k" => self.mcp.fifo_k = parse(key, v)?,
            "mcp.bias" => self.mcp.bias = v.parse()?,
            "mcp.distance" => self.mcp.distance = v.parse()?,
            "mcp.ffn_mult" => self.mcp.ffn_mult = parse(key, v)?,
            "dsf.enabled" => self.dsf.enabled = parse_bool(key, v)?,
            "dsf.count" => self.dsf.count = parse(key, v)?,
            "dsf.inner" => self.dsf.inner = parse(key, v)?,
            "dsf.state" => self.dsf.state = parse(key, v)?,
            "dsf.conv_width" => self.dsf.conv_width = parse(key, v)?,
            "dsf.dt_rank" => self.dsf.dt_rank = parse(key, v)?,
            "dsf.source" => self.dsf.source = v.parse()?,
            "head.hidden" => self.head.hidden = parse(key, v)?,
            "track.search_factor" => self.track.search_factor = parse(key, v)?,
            "track.template_factor" => self.track.template_factor = parse(key, v)?,
            "data.frame_size" => self.data.frame_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.adam_eps" => self.train.adam_eps = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.sequences" => self.train.sequences = parse(key, v)?,
            "train.seq_len" => self.train.seq_len = parse(key, v)?,
            "train.max_gap" => self.train.max_gap = parse(key, v)?,
            "train.jitter_center" => self.train.jitter_center = parse(key, v)?,
            "train.jitter_scale" => self.train.jitter_scale = parse(key, v)?,
            "train.memory_backprop" => self.train.memory_backprop = parse_bool(key, v)?,
            "train.data_seed" => self.train.data_seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let e = &self.embed;
        let b = &self.backbone;
        let m = &self.mcp;
        let s = &self.dsf;
        let t = &self.train;
        let lines = [
            format!("seed={}", self.seed),
            format!("embed.patch={}", e.patch),
            format!("embed.search_size={}", e.search_size),
            format!("embed.template_size={}", e.template_size),
            format!("embed.templates={}", e.templates),
            format!("embed.text_dim={}", e.text_dim),
            format!("backbone.depth={}", b.depth),
            format!("backbone.d={}", b.d),
            format!("backbone.heads={}", b.heads),
            format!("backbone.ffn_mult={}", b.ffn_mult),
            format!("backbone.fusion_start={}", b.fusion_start),
            format!("mcp.enabled={}", m.enabled),
            format!("mcp.n_tokens={}", m.n_tokens),
            format!("mcp.bank_l={}", m.bank_l),
            format!("mcp.policy={}", m.policy),
            format!("mcp.fifo_k={}", m.fifo_k),
            format!("mcp.bias={}", m.bias),
            format!("mcp.distance={}", m.distance),
            format!("mcp.ffn_mult={}", m.ffn_mult),
            format!("dsf.enabled={}", s.enabled),
            format!("dsf.count={}", s.count),
            format!("dsf.inner={}", s.inner),
            format!("dsf.state={}", s.state),
            format!("dsf.conv_width={}", s.conv_width),
            format!("dsf.dt_rank={}", s.dt_rank),
            format!("dsf.source={}", s.source),
            format!("head.hidden={}", self.head.hidden),
            format!("track.search_factor={:?}", self.track.search_factor),
            format!("track.template_factor={:?}", self.track.template_factor),
            format!("data.frame_size={}", self.data.frame_size),
            format!("train.lr={:?}", t.lr),
            format!("train.steps={}", t.steps),
            format!("train.weight_decay={:?}", t.weight_decay),
            format!("train.beta1={:?}", t.beta1),
            format!("train.beta2={:?}", t.beta2),
            format!("train.adam_eps={:?}", t.adam_eps),
            format!("train.grad_clip={:?}", t.grad_clip),
            format!("train.sequences={}", t.sequences),
            format!("train.seq_len={}", t.seq_len),
            format!("train.max_gap={}", t.max_gap),
            format!("train.jitter_center={:?}", t.jitter_center),
            format!("train.jitter_scale={:?}", t.jitter_scale),
            format!("train.memory_backprop={}", t.memory_backprop),
            format!("train.data_seed={}", t.data_seed),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let e = &self.embed;
        if e.patch == 0 || e.search_size % e.patch != 0 || e.template_size % e.patch != 0 {
            return bad(format!(
                "search {} and template {} must be multiples of patch {}",
                e.search_size, e.template_size, e.patch
            ));
        }
        let g = e.search_size / e.patch;
        if g < 2 {
            return bad("search grid must be at least 2×2".into());
        }
        let b = &self.backbone;
        if b.d == 0 || b.heads == 0 || b.d % b.heads != 0 {
            return bad(format!("backbone.d {} must be a positive multiple of heads {}", b.d, b.heads));
        }
        if b.depth == 0 || b.fusion_start >= b.depth {
            return bad(format!("fusion_start {} must be below depth {}", b.fusion_start, b.depth));
        }
        if self.mcp.enabled && (self.mcp.n_tokens == 0 || self.mcp.bank_l == 0) {
            return bad("mcp.n_tokens and mcp.bank_l must be at least 1".into());
        }
        if self.mcp.fifo_k == 0 {
            return bad("mcp.fifo_k must be at least 1".into());
        }
        let s = &self.dsf;
        if s.enabled && (s.count == 0 || s.count > b.depth - b.fusion_start) {
            return bad(format!(
                "dsf.count {} must be between 1 and the fusion span {}",
                s.count,
                b.depth - b.fusion_start
            ));
        }
        if s.state == 0 || s.conv_width == 0 {
            return bad("dsf.state and dsf.conv_width must be positive".into());
        }
        if e.templates == 0 {
            return bad("embed.templates must be at least 1".into());
        }
        if !(self.track.search_factor > 0.0 && self.track.template_factor > 0.0) {
            return bad("crop factors must be positive".into());
        }
        Ok(())
    }

    pub fn dsf_inner(&self) -> usize {
        if self.dsf.inner == 0 {
            2 * self.backbone.d
        } else {
            self.dsf.inner
        }
    }

    pub fn dt_rank(&self) -> usize {
        if self.dsf.dt_rank == 0 {
            self.backbone.d.div_ceil(16)
        } else {
            self.dsf.dt_rank
        }
    }

    pub fn search_grid(&self) -> usize {
        self.embed.search_size / self.embed.patch
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid() * self.search_grid()
    }

    pub fn template_tokens(&self) -> usize {
        let g = self.embed.template_size / self.embed.patch;
        g * g
    }

    /// Number of memory prompt tokens in the backbone sequence (0 when off).
    pub fn memory_tokens(&self) -> usize {
        if self.mcp.enabled {
            self.mcp.n_tokens
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = Config::compact();
        c.mcp.policy = MemoryPolicy::FifoEveryK;
        c.dsf.source = DsfSource::StageInput;
        c.train.lr = 3e-4;
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn spec_keys_parse() {
        let c = Config::parse("# comment\nmcp.n_tokens=16\nmcp.bank_l=50\ndsf.count=4\nbackbone.depth=8\ntrain.lr=1e-3\nseed=42\n").unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.train.lr, 1e-3);
    }

    #[test]
    fn unknown_key_is_error() {
        assert!(matches!(Config::parse("mcp.tokens=3"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("no equals sign"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("mcp.policy=lifo"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("preset=huge"), Err(Error::Config(_))));
    }

    #[test]
    fn presets_reset_every_field() {
        assert_eq!(Config::parse("preset=desk").unwrap(), Config::desk());
        let c = Config::parse("preset=compact\nmcp.n_tokens=4").unwrap();
        assert_eq!(c.mcp.n_tokens, 4);
        assert_eq!(c.backbone.d, Config::compact().backbone.d);
    }

    #[test]
    fn invalid_combinations_rejected() {
        assert!(Config::parse("backbone.heads=5").is_err());
        assert!(Config::parse("dsf.count=9").is_err());
        assert!(Config::parse("embed.search_size=60").is_err());
    }
}
