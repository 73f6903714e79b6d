use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::gnn::GnnConfig;
use crate::graph::ShiftConfig;
use crate::grpo::{GrpoConfig, RewardConfig};
use crate::lm::{sequence_len, LmConfig, SftConfig};
use crate::rng::derive;
use crate::tokenizer::TokenizerConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Method variant; the ablations each switch off one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoEncoder,
    NoDiff,
    NoAlign,
    NoConf,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoEncoder, Variant::NoDiff, Variant::NoAlign, Variant::NoConf];

    /// Label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEncoder => "w/o Encoder",
            Variant::NoDiff => "w/o Diff",
            Variant::NoAlign => "w/o Align",
            Variant::NoConf => "w/o Conf",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEncoder => "no-encoder",
            Variant::NoDiff => "no-diff",
            Variant::NoAlign => "no-align",
            Variant::NoConf => "no-conf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s || v.label() == s)
            .ok_or_else(|| Error::contract(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Generator settings, used unless both graph files are given.
    pub synthetic: ShiftConfig,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { synthetic: ShiftConfig::default(), source: None, target: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubgraphConfig {
    pub hops: usize,
    pub max_nodes: usize,
    /// Source subgraphs used for tokenizer training and trajectories.
    pub train_count: usize,
}

impl Default for SubgraphConfig {
    fn default() -> Self {
        SubgraphConfig { hops: 2, max_nodes: 16, train_count: 200 }
    }
}

/// Transformer shape; vocabulary and context follow from the tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmShape {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for LmShape {
    fn default() -> Self {
        LmShape { width: 128, layers: 4, heads: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSchedule {
    pub steps: usize,
    pub prompts_per_step: usize,
    /// Target nodes kept out of the prompt pool to measure reward before and after.
    pub holdout: usize,
}

impl Default for AlignSchedule {
    fn default() -> Self {
        AlignSchedule { steps: 20, prompts_per_step: 4, holdout: 16 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Classify each node from its own refined subgraph.
    #[default]
    CenterOnly,
    /// Classify nodes on the stitched refined graph.
    Stitch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    /// Sampling temperature for refinement, `0` for greedy.
    pub temperature: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { mode: AdaptMode::CenterOnly, temperature: 0.0 }
    }
}

/// Every setting of a run. Component seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub variant: Variant,
    pub data: DataConfig,
    pub gnn: GnnConfig,
    pub subgraph: SubgraphConfig,
    pub tokenizer: TokenizerConfig,
    pub lm: LmShape,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub align: AlignSchedule,
    pub adapt: AdaptConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 0,
            variant: Variant::Full,
            data: DataConfig::default(),
            gnn: GnnConfig::default(),
            subgraph: SubgraphConfig::default(),
            tokenizer: TokenizerConfig::default(),
            lm: LmShape::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
            align: AlignSchedule::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small settings that run end to end on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut c = PipelineConfig::default();
        c.gnn.hidden = 32;
        c.gnn.epochs = 200;
        c.subgraph = SubgraphConfig { hops: 2, max_nodes: 12, train_count: 200 };
        c.tokenizer.num_queries = 8;
        c.tokenizer.codebook_size = 64;
        c.tokenizer.steps = 3;
        c.tokenizer.heads = 2;
        c.tokenizer.denoiser_hidden = 32;
        c.tokenizer.epochs = 100;
        c.tokenizer.query_noise = 0.5;
        c.tokenizer.residual_decoder = true;
        c.tokenizer.lr = 3e-3;
        c.lm = LmShape { width: 64, layers: 2, heads: 2 };
        c.sft.lr = 1e-3;
        c.sft.epochs = 4;
        c.grpo.group_size = 6;
        c.grpo.lr = 1e-4;
        c.align = AlignSchedule { steps: 20, prompts_per_step: 4, holdout: 16 };
        c
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.version == CONFIG_VERSION, "config version {} is not supported (expected {CONFIG_VERSION})", self.version);
        ensure!(
            self.data.source.is_some() == self.data.target.is_some(),
            "data.source and data.target must be given together"
        );
        if self.data.source.is_none() {
            self.data.synthetic.validate()?;
        }
        ensure!(self.gnn.hidden >= 1 && self.gnn.layers >= 1, "GNN shape must be positive");
        ensure!(self.gnn.lr > 0.0 && self.gnn.weight_decay >= 0.0, "invalid GNN optimizer settings");
        ensure!(self.subgraph.max_nodes >= 1 && self.subgraph.train_count >= 1, "subgraph caps must be positive");
        self.tokenizer.validate()?;
        self.lm_config().validate()?;
        ensure!(self.sft.lr > 0.0 && self.sft.batch_size >= 1, "invalid SFT settings");
        self.grpo.validate()?;
        self.reward.validate()?;
        ensure!(self.align.prompts_per_step >= 1, "GRPO needs at least one prompt per step");
        ensure!(self.adapt.temperature >= 0.0, "adaptation temperature must be nonnegative");
        Ok(())
    }

    /// The configuration with variant switches applied and component seeds derived.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.data.synthetic.seed = derive(self.seed, 100);
        c.gnn.seed = derive(self.seed, 101);
        c.tokenizer.seed = derive(self.seed, 102);
        c.sft.seed = derive(self.seed, 103);
        match self.variant {
            Variant::Full => {}
            Variant::NoEncoder => c.tokenizer.no_encoder = true,
            Variant::NoDiff => c.tokenizer.no_diffusion = true,
            Variant::NoAlign => c.reward.use_align = false,
            Variant::NoConf => c.reward.use_conf = false,
        }
        c
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            codebook_size: self.tokenizer.codebook_size,
            width: self.lm.width,
            layers: self.lm.layers,
            heads: self.lm.heads,
            context: sequence_len(self.tokenizer.num_queries, self.tokenizer.steps),
            seed: derive(self.seed, 104),
        }
    }

    /// Seed for stage-local randomness (subgraph sampling, prompt choice).
    pub fn stage_seed(&self, tag: u64) -> u64 {
        derive(self.seed, 200 + tag)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    /// Reads a `.toml` or JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    /// Applies `dotted.key=value` overrides. Values are parsed as JSON when
    /// possible and taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("override `{o}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::contract(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        serde_json::from_value(v).map_err(|e| Error::Schema(e.to_string()))
    }

    /// Hash of the whole resolved configuration.
    pub fn hash(&self) -> String {
        hash_value(&serde_json::to_value(self.resolved()).expect("config serializes"))
    }

    /// Hash of the settings that `stage` and its upstream stages depend on.
    pub fn stage_hash(&self, stage: super::Stage) -> String {
        use super::Stage::*;
        let c = self.resolved();
        let mut parts = vec![
            ("version", serde_json::json!(c.version)),
            ("seed", serde_json::json!(c.seed)),
            ("data", serde_json::to_value(&c.data).expect("serializes")),
            ("gnn", serde_json::to_value(&c.gnn).expect("serializes")),
        ];
        if stage >= TrainTokenizer {
            parts.push(("subgraph", serde_json::to_value(&c.subgraph).expect("serializes")));
            parts.push(("tokenizer", serde_json::to_value(&c.tokenizer).expect("serializes")));
        }
        if stage >= Sft {
            parts.push(("lm", serde_json::to_value(&c.lm).expect("serializes")));
            parts.push(("sft", serde_json::to_value(&c.sft).expect("serializes")));
        }
        if stage >= Grpo {
            parts.push(("grpo", serde_json::to_value(&c.grpo).expect("serializes")));
            parts.push(("reward", serde_json::to_value(&c.reward).expect("serializes")));
            parts.push(("align", serde_json::to_value(&c.align).expect("serializes")));
        }
        if stage >= Adapt {
            parts.push(("adapt", serde_json::to_value(&c.adapt).expect("serializes")));
        }
        let map: serde_json::Map<String, Value> = parts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        hash_value(&Value::Object(map))
    }
}

fn hash_value(v: &Value) -> String {
    let text = serde_json::to_string(v).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Stage;

    #[test]
    fn json_round_trip_is_identity() {
        for c in [PipelineConfig::default(), PipelineConfig::desk()] {
            assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn toml_round_trip_is_identity() {
        let c = PipelineConfig::desk();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
        PipelineConfig::desk().validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = PipelineConfig::default()
            .with_overrides(&["tokenizer.steps=4", "variant=no-diff", "grpo.beta_kl=0.5"])
            .unwrap();
        assert_eq!(c.tokenizer.steps, 4);
        assert_eq!(c.variant, Variant::NoDiff);
        assert_eq!(c.grpo.beta_kl, 0.5);
        assert!(PipelineConfig::default().with_overrides(&["tokenizer.nope=1"]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["seed"]).is_err());
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn ablations_of_the_reward_share_upstream_hashes() {
        let full = PipelineConfig::desk();
        let no_align = PipelineConfig { variant: Variant::NoAlign, ..full.clone() };
        let no_diff = PipelineConfig { variant: Variant::NoDiff, ..full.clone() };
        assert_eq!(full.stage_hash(Stage::Sft), no_align.stage_hash(Stage::Sft));
        assert_ne!(full.stage_hash(Stage::Grpo), no_align.stage_hash(Stage::Grpo));
        assert_eq!(full.stage_hash(Stage::PretrainGnn), no_diff.stage_hash(Stage::PretrainGnn));
        assert_ne!(full.stage_hash(Stage::TrainTokenizer), no_diff.stage_hash(Stage::TrainTokenizer));
        assert_ne!(full.hash(), no_align.hash());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
    }
}
