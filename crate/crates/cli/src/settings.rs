//! Run settings: built-in defaults, then a `key = value` config file, then
//! command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kvpersona::decoder::DecoderConfig;
use kvpersona::kv::StorageDtype;
use kvpersona::tokenizer::ByteTokenizer;
use kvpersona::{Defaults, MiningParams};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PrecisionFlag {
    F16,
    F32,
    F64,
}

impl PrecisionFlag {
    pub fn cache_dtype(self) -> StorageDtype {
        match self {
            Self::F16 => StorageDtype::F16,
            Self::F32 => StorageDtype::F32,
            Self::F64 => StorageDtype::F64,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f16" => Some(Self::F16),
            "f32" => Some(Self::F32),
            "f64" => Some(Self::F64),
            _ => None,
        }
    }
}

/// Values given on the command line; `None` means "not given".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub repo: Option<PathBuf>,
    pub seed: Option<u64>,
    pub precision: Option<PrecisionFlag>,
    pub k_attr: Option<usize>,
    pub k_patch: Option<usize>,
    pub grid: Option<usize>,
    pub gamma: Option<f64>,
    pub min_coverage: Option<f64>,
    pub min_mask_area: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub repo: PathBuf,
    pub seed: u64,
    pub precision: PrecisionFlag,
    pub k_attr: usize,
    pub k_patch: usize,
    pub mining: MiningParams,
    pub decoder: DecoderConfig,
    pub text_dim: usize,
    pub max_new_tokens: usize,
    pub resolution_floor: f64,
}

const KEYS: [&str; 15] = [
    "repo",
    "seed",
    "precision",
    "k_attr",
    "k_patch",
    "grid",
    "gamma",
    "min_coverage",
    "min_mask_area",
    "evidence_images",
    "layers",
    "heads",
    "head_dim",
    "text_dim",
    "max_new_tokens",
];

const EXTRA_KEYS: [&str; 1] = ["resolution_floor"];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("config line {}: expected key = value", i + 1))
        })?;
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) && !EXTRA_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!(
                "config line {}: unknown key {key:?}",
                i + 1
            )));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn parsed<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, CliError> {
    map.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| CliError::Usage(format!("config {key}: bad value {v:?}")))
        })
        .transpose()
}

impl Settings {
    pub fn resolve(config: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        let d = Defaults::default();
        let mut mining = d.mining_params();
        let precision = match (flags.precision, file.get("precision")) {
            (Some(p), _) => p,
            (None, Some(s)) => PrecisionFlag::parse(s)
                .ok_or_else(|| CliError::Usage(format!("config precision: bad value {s:?}")))?,
            (None, None) => match d.cache_dtype {
                StorageDtype::F32 => PrecisionFlag::F32,
                StorageDtype::F64 => PrecisionFlag::F64,
                _ => PrecisionFlag::F16,
            },
        };
        mining.grid_size = flags
            .grid
            .or(parsed(&file, "grid")?)
            .unwrap_or(mining.grid_size);
        mining.top_k = flags
            .k_patch
            .or(parsed(&file, "k_patch")?)
            .unwrap_or(mining.top_k);
        mining.fusion_exponent = flags
            .gamma
            .or(parsed(&file, "gamma")?)
            .unwrap_or(mining.fusion_exponent);
        mining.min_coverage = flags
            .min_coverage
            .or(parsed(&file, "min_coverage")?)
            .unwrap_or(mining.min_coverage);
        mining.min_mask_area = flags
            .min_mask_area
            .or(parsed(&file, "min_mask_area")?)
            .unwrap_or(mining.min_mask_area);
        mining.evidence_images =
            parsed(&file, "evidence_images")?.unwrap_or(mining.evidence_images);
        mining
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;

        let default_decoder = kvpersona::harness::BenchConfig::default().decoder;
        let decoder = DecoderConfig::new(
            parsed(&file, "layers")?.unwrap_or(default_decoder.num_layers),
            parsed(&file, "heads")?.unwrap_or(default_decoder.num_heads),
            parsed(&file, "head_dim")?.unwrap_or(default_decoder.head_dim),
            ByteTokenizer::VOCAB,
        );
        decoder
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;

        let repo = flags
            .repo
            .clone()
            .or_else(|| file.get("repo").map(PathBuf::from))
            .ok_or_else(|| {
                CliError::Usage("no repository: pass --repo, set KVPERSONA_REPO or add repo = <dir> to the config".into())
            })?;
        let settings = Self {
            repo,
            seed: flags.seed.or(parsed(&file, "seed")?).unwrap_or(0),
            precision,
            k_attr: flags
                .k_attr
                .or(parsed(&file, "k_attr")?)
                .unwrap_or(d.k_attr),
            k_patch: mining.top_k,
            mining,
            decoder,
            text_dim: parsed(&file, "text_dim")?.unwrap_or(d.text_dim),
            max_new_tokens: parsed(&file, "max_new_tokens")?.unwrap_or(d.max_new_tokens),
            resolution_floor: parsed(&file, "resolution_floor")?.unwrap_or(d.resolution_floor),
        };
        if settings.k_attr == 0 || settings.k_patch == 0 {
            return Err(CliError::Usage("k values must be at least 1".into()));
        }
        if settings.max_new_tokens == 0 {
            return Err(CliError::Usage("max_new_tokens must be at least 1".into()));
        }
        Ok(settings)
    }
}
