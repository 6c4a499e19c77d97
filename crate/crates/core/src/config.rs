//! Codec configuration: schema, the flat `key=value` text format, validation,
//! and all frame-rate / hop / bitrate arithmetic.
//!
//! The config file is a list of `key = value` lines. `#` starts a comment.
//! List values are comma separated (`seanet_ratios = 8,6,5,4`). Loss weights
//! live under the `loss_weights.` prefix and training options under `train.`
//! (parsed by [`crate::train::TrainConfig`]). Unknown keys are reported as
//! warnings and otherwise ignored.

use std::fmt::Write as _;
use std::ops::Deref;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Rate at which the semantic teacher emits frames.
pub const TEACHER_FRAME_RATE_HZ: f64 = 12.5;

/// Environment variable that overrides `seed`.
pub const SEED_ENV_VAR: &str = "OMNICODEC_SEED";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ac_recon: f64,
    pub se_recon: f64,
    pub commit: f64,
    pub self_guidance: f64,
    pub dis: f64,
    pub gen: f64,
    pub fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ac_recon: 15.0,
            se_recon: 1.0,
            commit: 1.0,
            self_guidance: 0.1,
            dis: 1.0,
            gen: 1.0,
            fm: 1.0,
        }
    }
}

impl LossWeights {
    fn entries(&self) -> [(&'static str, f64); 7] {
        [
            ("ac_recon", self.ac_recon),
            ("se_recon", self.se_recon),
            ("commit", self.commit),
            ("self_guidance", self.self_guidance),
            ("dis", self.dis),
            ("gen", self.gen),
            ("fm", self.fm),
        ]
    }

    fn slot(&mut self, name: &str) -> Option<&mut f64> {
        Some(match name {
            "ac_recon" => &mut self.ac_recon,
            "se_recon" => &mut self.se_recon,
            "commit" => &mut self.commit,
            "self_guidance" => &mut self.self_guidance,
            "dis" => &mut self.dis,
            "gen" => &mut self.gen,
            "fm" => &mut self.fm,
            _ => return None,
        })
    }

    /// True when the adversarial terms contribute nothing.
    pub fn adversarial_disabled(&self) -> bool {
        self.dis == 0.0 && self.gen == 0.0 && self.fm == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub sample_rate_hz: u32,
    pub teacher_sample_rate_hz: u32,
    pub seanet_ratios: Vec<u32>,
    pub extra_downsample: u32,
    pub hidden_dim: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_ff_dim: usize,
    pub semantic_codebook_size: usize,
    pub semantic_dim: usize,
    pub acoustic_stages: usize,
    pub acoustic_codebook_size: usize,
    pub acoustic_code_dim: usize,
    pub quantizer_dropout: bool,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Ablation switch: route semantic teacher features through their own VQ.
    pub semantic_branch: bool,
    /// Ablation switch: learned Adapter-1; when false a fixed slicing map is used.
    pub learned_adapter: bool,
    /// Ablation switch: dual-path decode and the self-guidance term.
    pub self_guidance: bool,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    pub dead_code_threshold: f64,
    pub reseed_dead_codes: bool,
    pub disc_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 24_000,
            teacher_sample_rate_hz: 16_000,
            seanet_ratios: vec![8, 6, 5, 4],
            extra_downsample: 2,
            hidden_dim: 512,
            transformer_layers: 8,
            transformer_heads: 8,
            transformer_ff_dim: 2048,
            semantic_codebook_size: 2048,
            semantic_dim: 1024,
            acoustic_stages: 31,
            acoustic_codebook_size: 2048,
            acoustic_code_dim: 256,
            quantizer_dropout: true,
            loss_weights: LossWeights::default(),
            seed: 0,
            semantic_branch: true,
            learned_adapter: true,
            self_guidance: true,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            dead_code_threshold: 0.1,
            reseed_dead_codes: true,
            disc_channels: 32,
        }
    }
}

impl CodecConfig {
    /// A CPU-sized model with the same hop, rates and wiring as the default.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 64,
            transformer_layers: 2,
            transformer_heads: 4,
            transformer_ff_dim: 128,
            semantic_codebook_size: 64,
            semantic_dim: 64,
            acoustic_stages: 8,
            acoustic_codebook_size: 64,
            acoustic_code_dim: 16,
            disc_channels: 4,
            ..Self::default()
        }
    }

    pub fn validate(self) -> Result<ValidatedConfig> {
        ValidatedConfig::new(self)
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.architecture_entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in self.loss_weights.entries() {
            let _ = writeln!(s, "loss_weights.{k} = {v:?}");
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Everything that affects parameter shapes or the token stream.
    fn architecture_entries(&self) -> Vec<(&'static str, String)> {
        let ratios = self
            .seanet_ratios
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("sample_rate_hz", self.sample_rate_hz.to_string()),
            ("teacher_sample_rate_hz", self.teacher_sample_rate_hz.to_string()),
            ("seanet_ratios", ratios),
            ("extra_downsample", self.extra_downsample.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("transformer_layers", self.transformer_layers.to_string()),
            ("transformer_heads", self.transformer_heads.to_string()),
            ("transformer_ff_dim", self.transformer_ff_dim.to_string()),
            ("semantic_codebook_size", self.semantic_codebook_size.to_string()),
            ("semantic_dim", self.semantic_dim.to_string()),
            ("acoustic_stages", self.acoustic_stages.to_string()),
            ("acoustic_codebook_size", self.acoustic_codebook_size.to_string()),
            ("acoustic_code_dim", self.acoustic_code_dim.to_string()),
            ("quantizer_dropout", self.quantizer_dropout.to_string()),
            ("semantic_branch", self.semantic_branch.to_string()),
            ("learned_adapter", self.learned_adapter.to_string()),
            ("self_guidance", self.self_guidance.to_string()),
            ("ema_decay", format!("{:?}", self.ema_decay)),
            ("ema_epsilon", format!("{:?}", self.ema_epsilon)),
            ("dead_code_threshold", format!("{:?}", self.dead_code_threshold)),
            ("reseed_dead_codes", self.reseed_dead_codes.to_string()),
            ("disc_channels", self.disc_channels.to_string()),
        ]
    }

    /// Hash of the architecture fields. Seeds and loss weights are excluded so
    /// a checkpoint can be resumed or decoded under different training knobs.
    pub fn config_hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        for (k, v) in self.architecture_entries() {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }

    /// Apply `OMNICODEC_SEED` if it is set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV_VAR) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("{SEED_ENV_VAR}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }
}

/// A configuration that passed validation, with derived quantities filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    config: CodecConfig,
    pub hop: usize,
    pub frame_rate_hz: f64,
    pub bits_per_code: u32,
    /// Channel count of the first SEANet stage.
    pub base_channels: usize,
    /// Number of 12.5 Hz teacher frames pooled into one codec frame.
    pub teacher_frames_per_frame: usize,
}

impl Deref for ValidatedConfig {
    type Target = CodecConfig;

    fn deref(&self) -> &CodecConfig {
        &self.config
    }
}

impl ValidatedConfig {
    fn new(config: CodecConfig) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let positive = [
            ("sample_rate_hz", config.sample_rate_hz as usize),
            ("teacher_sample_rate_hz", config.teacher_sample_rate_hz as usize),
            ("extra_downsample", config.extra_downsample as usize),
            ("hidden_dim", config.hidden_dim),
            ("transformer_layers", config.transformer_layers),
            ("transformer_heads", config.transformer_heads),
            ("transformer_ff_dim", config.transformer_ff_dim),
            ("semantic_codebook_size", config.semantic_codebook_size),
            ("semantic_dim", config.semantic_dim),
            ("acoustic_stages", config.acoustic_stages),
            ("acoustic_codebook_size", config.acoustic_codebook_size),
            ("acoustic_code_dim", config.acoustic_code_dim),
            ("disc_channels", config.disc_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if config.seanet_ratios.is_empty() || config.seanet_ratios.contains(&0) {
            return bad("seanet_ratios must be a non-empty list of positive integers".into());
        }
        for (name, w) in config.loss_weights.entries() {
            if !w.is_finite() || w < 0.0 {
                return bad(format!("loss weight {name} must be finite and >= 0, got {w}"));
            }
        }
        if config.hidden_dim % config.transformer_heads != 0
            || (config.hidden_dim / config.transformer_heads) % 2 != 0
        {
            return bad(format!(
                "hidden_dim {} must split into {} heads of even width",
                config.hidden_dim, config.transformer_heads
            ));
        }
        // u16 token storage reserves 0xFFFF for inactive stages.
        for (name, k) in [
            ("semantic_codebook_size", config.semantic_codebook_size),
            ("acoustic_codebook_size", config.acoustic_codebook_size),
        ] {
            if k > 0xFFFF {
                return bad(format!("{name} {k} exceeds 65535"));
            }
        }
        if config.acoustic_stages + 1 > u16::MAX as usize {
            return bad("too many acoustic stages".into());
        }
        if !(0.0..1.0).contains(&config.ema_decay) || !(config.ema_epsilon > 0.0) {
            return bad("ema_decay must be in [0,1) and ema_epsilon > 0".into());
        }
        if !(config.dead_code_threshold >= 0.0) {
            return bad("dead_code_threshold must be >= 0".into());
        }

        let hop = config
            .seanet_ratios
            .iter()
            .fold(config.extra_downsample as u64, |acc, &r| acc * r as u64);
        let sr = config.sample_rate_hz as u64;
        // The frame rate sr/hop must be an exact binary fraction (12.5, 6.25, ...)
        // so that frame-rate and bitrate arithmetic is exact.
        let g = gcd(sr, hop);
        let denom = hop / g;
        if !denom.is_power_of_two() {
            return Err(Error::NonIntegerHop {
                sample_rate: config.sample_rate_hz,
                hop,
            });
        }
        let frame_rate_hz = sr as f64 / hop as f64;

        let mut teacher_frames_per_frame = 1;
        if config.semantic_branch {
            let teacher_hop = config.sample_rate_hz as f64 / TEACHER_FRAME_RATE_HZ;
            let teacher_hop_16k = config.teacher_sample_rate_hz as f64 / TEACHER_FRAME_RATE_HZ;
            if teacher_hop.fract() != 0.0 || teacher_hop_16k.fract() != 0.0 {
                return bad("sample rates must be multiples of the 12.5 Hz teacher rate".into());
            }
            let ratio = TEACHER_FRAME_RATE_HZ / frame_rate_hz;
            if ratio.fract() != 0.0 || ratio < 1.0 {
                return bad(format!(
                    "codec frame rate {frame_rate_hz} Hz must divide the 12.5 Hz teacher rate"
                ));
            }
            teacher_frames_per_frame = ratio as usize;
        }

        let n = config.seanet_ratios.len() as u32;
        let base_channels = (config.hidden_dim >> n.min(31)).max(1);
        let bits_per_code = bits_per_code(config.acoustic_codebook_size).max(
            if config.semantic_branch {
                bits_per_code(config.semantic_codebook_size)
            } else {
                0
            },
        );
        Ok(Self {
            config,
            hop: hop as usize,
            frame_rate_hz,
            bits_per_code,
            base_channels,
            teacher_frames_per_frame,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn into_config(self) -> CodecConfig {
        self.config
    }

    /// Streams in a full token frame: one semantic stream (when enabled) plus
    /// every acoustic stage.
    pub fn total_streams(&self) -> usize {
        self.acoustic_stages + usize::from(self.semantic_branch)
    }

    pub fn frames_for_samples(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }

    pub fn nominal_bitrate_bps(&self, streams: usize) -> f64 {
        bitrate_bps(self.frame_rate_hz, streams as u32, self.bits_per_code)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `ceil(log2(codebook_size))`.
pub fn bits_per_code(codebook_size: usize) -> u32 {
    if codebook_size <= 1 {
        0
    } else {
        usize::BITS - (codebook_size - 1).leading_zeros()
    }
}

/// Nominal bitrate: frame rate x streams x bits per code. No rounding.
pub fn bitrate_bps(frame_rate_hz: f64, total_streams: u32, bits_per_code: u32) -> f64 {
    frame_rate_hz * total_streams as f64 * bits_per_code as f64
}

/// One `key = value` line from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
    /// 1-based column where the value starts.
    pub value_column: usize,
}

/// Split config text into entries. Rejects lines without `=`, empty keys and
/// empty values.
pub fn parse_entries(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let Some(eq) = content.find('=') else {
            let col = content.len() - content.trim_start().len() + 1;
            return Err(Error::Parse {
                line: line_no,
                column: col,
                message: "expected `key = value`".into(),
            });
        };
        let key = content[..eq].trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                column: 1,
                message: "empty key".into(),
            });
        }
        let after = &content[eq + 1..];
        let value = after.trim();
        let value_column = eq + 2 + (after.len() - after.trim_start().len());
        if value.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                column: value_column,
                message: format!("missing value for `{key}`"),
            });
        }
        out.push(ConfigEntry {
            key: key.to_string(),
            value: value.to_string(),
            line: line_no,
            value_column,
        });
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(entry: &ConfigEntry, what: &str) -> Result<T> {
    entry.value.parse::<T>().map_err(|_| Error::Parse {
        line: entry.line,
        column: entry.value_column,
        message: format!("`{}` expects {what}, got {:?}", entry.key, entry.value),
    })
}

pub(crate) fn parse_bool(entry: &ConfigEntry) -> Result<bool> {
    match entry.value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Parse {
            line: entry.line,
            column: entry.value_column,
            message: format!("`{}` expects a boolean, got {:?}", entry.key, entry.value),
        }),
    }
}

/// Parse config text. Returns the config (defaults for absent keys) and a
/// warning for every unknown key. Keys under `train.` are left to the
/// training config parser.
pub fn parse_config(text: &str) -> Result<(CodecConfig, Vec<String>)> {
    let mut cfg = CodecConfig::default();
    let mut warnings = Vec::new();
    for e in parse_entries(text)? {
        let k = e.key.as_str();
        match k {
            "sample_rate_hz" => cfg.sample_rate_hz = parse_value(&e, "an integer")?,
            "teacher_sample_rate_hz" => cfg.teacher_sample_rate_hz = parse_value(&e, "an integer")?,
            "seanet_ratios" => {
                cfg.seanet_ratios = e
                    .value
                    .split(',')
                    .map(|p| {
                        p.trim().parse::<u32>().map_err(|_| Error::Parse {
                            line: e.line,
                            column: e.value_column,
                            message: format!("`seanet_ratios` expects integers, got {:?}", e.value),
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "extra_downsample" => cfg.extra_downsample = parse_value(&e, "an integer")?,
            "hidden_dim" => cfg.hidden_dim = parse_value(&e, "an integer")?,
            "transformer_layers" => cfg.transformer_layers = parse_value(&e, "an integer")?,
            "transformer_heads" => cfg.transformer_heads = parse_value(&e, "an integer")?,
            "transformer_ff_dim" => cfg.transformer_ff_dim = parse_value(&e, "an integer")?,
            "semantic_codebook_size" => cfg.semantic_codebook_size = parse_value(&e, "an integer")?,
            "semantic_dim" => cfg.semantic_dim = parse_value(&e, "an integer")?,
            "acoustic_stages" => cfg.acoustic_stages = parse_value(&e, "an integer")?,
            "acoustic_codebook_size" => cfg.acoustic_codebook_size = parse_value(&e, "an integer")?,
            "acoustic_code_dim" => cfg.acoustic_code_dim = parse_value(&e, "an integer")?,
            "quantizer_dropout" => cfg.quantizer_dropout = parse_bool(&e)?,
            "seed" => cfg.seed = parse_value(&e, "an unsigned integer")?,
            "semantic_branch" => cfg.semantic_branch = parse_bool(&e)?,
            "learned_adapter" => cfg.learned_adapter = parse_bool(&e)?,
            "self_guidance" => cfg.self_guidance = parse_bool(&e)?,
            "ema_decay" => cfg.ema_decay = parse_value(&e, "a number")?,
            "ema_epsilon" => cfg.ema_epsilon = parse_value(&e, "a number")?,
            "dead_code_threshold" => cfg.dead_code_threshold = parse_value(&e, "a number")?,
            "reseed_dead_codes" => cfg.reseed_dead_codes = parse_bool(&e)?,
            "disc_channels" => cfg.disc_channels = parse_value(&e, "an integer")?,
            _ if k.starts_with("train.") => {}
            _ => {
                if let Some(name) = k.strip_prefix("loss_weights.") {
                    if let Some(slot) = cfg.loss_weights.slot(name) {
                        *slot = parse_value(&e, "a number")?;
                        continue;
                    }
                }
                warnings.push(format!("line {}: unknown key `{k}` ignored", e.line));
            }
        }
    }
    Ok((cfg, warnings))
}

/// Read a config file. Defaults fill absent keys; validation is not implied.
pub fn load_config(path: &Path) -> Result<CodecConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (cfg, warnings) = parse_config(&text)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(cfg)
}
