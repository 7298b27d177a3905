use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, PolicyConfig, PpoConfig};
use crate::belief::EncoderConfig;
use crate::controllers::ControllerKind;
use crate::demand::{self, ArrivalProcess, ArrivalSchedule, MixedProfile};
use crate::diffnet::AdamConfig;
use crate::netsim::{load_network, QueueMode, RoadNetwork, RoadnetDocument};
use crate::worldmodel::{DecoderConfig, IntrinsicTerms, VaeUpdateConfig};
use crate::{Error, Result};

/// Which learner (or classical controller) an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// Policy without a latent (zeros in its place) and no world model.
    Baseline,
    /// Latent from the trained encoder, no intrinsic reward.
    Latent,
    /// Latent plus the observation-gap intrinsic reward only.
    LatentTranRs,
    /// Latent plus the reward-gap intrinsic reward only.
    LatentRewRs,
    Full,
    Classical(ControllerKind),
}

impl Variant {
    pub const LEARNED: [Variant; 5] = [
        Variant::Baseline,
        Variant::Latent,
        Variant::LatentTranRs,
        Variant::LatentRewRs,
        Variant::Full,
    ];

    pub fn uses_latent(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::Classical(_))
    }

    pub fn intrinsic_terms(self) -> IntrinsicTerms {
        match self {
            Variant::Full => IntrinsicTerms::BOTH,
            Variant::LatentTranRs => IntrinsicTerms {
                reward: false,
                obs: true,
            },
            Variant::LatentRewRs => IntrinsicTerms {
                reward: true,
                obs: false,
            },
            _ => IntrinsicTerms::NONE,
        }
    }

    pub fn is_classical(self) -> bool {
        matches!(self, Variant::Classical(_))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => f.write_str("baseline"),
            Variant::Latent => f.write_str("latent"),
            Variant::LatentTranRs => f.write_str("latent+tran_rs"),
            Variant::LatentRewRs => f.write_str("latent+rew_rs"),
            Variant::Full => f.write_str("full"),
            Variant::Classical(k) => write!(f, "classical:{k}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Variant::Baseline,
            "latent" => Variant::Latent,
            "latent+tran_rs" => Variant::LatentTranRs,
            "latent+rew_rs" => Variant::LatentRewRs,
            "full" => Variant::Full,
            other => match other.strip_prefix("classical:") {
                Some(kind) => Variant::Classical(kind.parse()?),
                None => return Err(Error::Config(format!("unknown variant `{other}`"))),
            },
        })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// Road network: a path to a roadnet document or the document inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RoadnetSpec {
    Path(PathBuf),
    Inline(serde_json::Value),
}

impl Default for RoadnetSpec {
    fn default() -> Self {
        RoadnetSpec::Inline(serde_json::json!({"grid": {"rows": 2, "cols": 2}}))
    }
}

impl RoadnetSpec {
    pub fn grid(rows: usize, cols: usize) -> Self {
        RoadnetSpec::Inline(serde_json::json!({"grid": {"rows": rows, "cols": cols}}))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSpec {
    #[default]
    MixedLow,
    MixedHigh,
    /// Explicit vehicle list in a flow document.
    Replay(PathBuf),
    /// Flow document with rate segments and/or vehicles.
    Flow(PathBuf),
}

impl fmt::Display for FlowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowSpec::MixedLow => f.write_str("mixed_low"),
            FlowSpec::MixedHigh => f.write_str("mixed_high"),
            FlowSpec::Replay(p) => write!(f, "replay:{}", p.display()),
            FlowSpec::Flow(p) => write!(f, "flow:{}", p.display()),
        }
    }
}

/// Training hyperparameters, named after the implementation-details table
/// where it gives a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub discount_factor: f64,
    pub gae_lambda: f64,
    pub policy_minibatch: usize,
    pub mvae_minibatch: usize,
    pub value_loss_coefficient: f64,
    pub entropy_coefficient: f64,
    pub elbo_loss_coefficient: f64,
    pub latent_space_dimensionality: usize,
    pub aggregator_hidden_size: usize,
    pub encoder_embedding_size: usize,
    pub policy_hidden_sizes: Vec<usize>,
    pub decoder_hidden_sizes: Vec<usize>,
    pub policy_learning_rate: f64,
    pub policy_adam_epsilon: f64,
    pub mvae_learning_rate: f64,
    pub mvae_adam_epsilon: f64,
    pub ppo_epochs: usize,
    pub ppo_clip: f64,
    /// Weight of the intrinsic reward in the shaped reward.
    pub intrinsic_weight: f64,
    /// Extrinsic rewards and reward targets are divided by this.
    pub reward_scale: f64,
    pub policy_buffer_size: usize,
    pub mvae_buffer_size: usize,
    /// Spacing of the prefix lengths at which the ELBO is evaluated.
    pub elbo_stride: usize,
    pub mvae_updates_per_iteration: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            discount_factor: 0.95,
            gae_lambda: 0.95,
            policy_minibatch: 16,
            mvae_minibatch: 25,
            value_loss_coefficient: 0.5,
            entropy_coefficient: 0.01,
            elbo_loss_coefficient: 1.0,
            latent_space_dimensionality: 5,
            aggregator_hidden_size: 64,
            encoder_embedding_size: 40,
            policy_hidden_sizes: vec![32, 32],
            decoder_hidden_sizes: vec![32, 32],
            policy_learning_rate: 7e-4,
            policy_adam_epsilon: 1e-5,
            mvae_learning_rate: 1e-3,
            mvae_adam_epsilon: 1e-5,
            ppo_epochs: 4,
            ppo_clip: 0.2,
            intrinsic_weight: 0.1,
            reward_scale: 50.0,
            policy_buffer_size: 60,
            mvae_buffer_size: 100_000,
            elbo_stride: 60,
            mvae_updates_per_iteration: 1,
        }
    }
}

impl Hyperparameters {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            embed: self.encoder_embedding_size,
            hidden: self.aggregator_hidden_size,
            latent: self.latent_space_dimensionality,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            hidden: self.decoder_hidden_sizes.clone(),
            latent: self.latent_space_dimensionality,
        }
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            hidden: self.policy_hidden_sizes.clone(),
            latent: self.latent_space_dimensionality,
        }
    }

    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            gamma: self.discount_factor,
            lambda: self.gae_lambda,
            alpha: self.intrinsic_weight,
            reward_scale: self.reward_scale,
            epochs: self.ppo_epochs,
            minibatch: self.policy_minibatch,
            clip: self.ppo_clip,
            value_coef: self.value_loss_coefficient,
            entropy_coef: self.entropy_coefficient,
            lr: self.policy_learning_rate,
            eps: self.policy_adam_epsilon,
        }
    }

    pub fn vae(&self) -> VaeUpdateConfig {
        VaeUpdateConfig {
            minibatch: self.mvae_minibatch,
            stride: self.elbo_stride,
            elbo_coef: self.elbo_loss_coefficient,
            adam: AdamConfig::new(self.mvae_learning_rate, self.mvae_adam_epsilon),
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("policy_minibatch", self.policy_minibatch),
            ("mvae_minibatch", self.mvae_minibatch),
            ("latent_space_dimensionality", self.latent_space_dimensionality),
            ("aggregator_hidden_size", self.aggregator_hidden_size),
            ("encoder_embedding_size", self.encoder_embedding_size),
            ("ppo_epochs", self.ppo_epochs),
            ("policy_buffer_size", self.policy_buffer_size),
            ("mvae_buffer_size", self.mvae_buffer_size),
            ("elbo_stride", self.elbo_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("hyperparameters.{name} must be positive")));
            }
        }
        let finite_positive = [
            ("policy_learning_rate", self.policy_learning_rate),
            ("mvae_learning_rate", self.mvae_learning_rate),
            ("policy_adam_epsilon", self.policy_adam_epsilon),
            ("mvae_adam_epsilon", self.mvae_adam_epsilon),
            ("reward_scale", self.reward_scale),
        ];
        for (name, v) in finite_positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("hyperparameters.{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.discount_factor) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("discount_factor and gae_lambda must lie in [0, 1]".into()));
        }
        if !(self.intrinsic_weight >= 0.0) {
            return Err(Error::Config("intrinsic_weight must be non-negative".into()));
        }
        if self.policy_hidden_sizes.contains(&0) || self.decoder_hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_iterations() -> usize {
    100
}

fn default_horizon() -> u32 {
    3600
}

fn default_interval() -> u32 {
    5
}

fn default_variant() -> Variant {
    Variant::Full
}

fn default_reward_weight() -> f64 {
    -1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub roadnet: RoadnetSpec,
    #[serde(default)]
    pub flow: FlowSpec,
    #[serde(default)]
    pub arrival_process: ArrivalProcess,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_horizon")]
    pub horizon_s: u32,
    #[serde(default = "default_interval")]
    pub control_interval_s: u32,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub eval_mode: ActMode,
    #[serde(default)]
    pub queue_mode: QueueMode,
    /// Extrinsic reward per stopped vehicle.
    #[serde(default = "default_reward_weight")]
    pub reward_weight: f64,
    /// Flows compared by `ablate`; empty means just `flow`.
    #[serde(default)]
    pub ablation_flows: Vec<FlowSpec>,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.control_interval_s == 0 || self.horizon_s % self.control_interval_s != 0 {
            return Err(Error::Config(format!(
                "horizon {} s is not a multiple of the control interval {} s",
                self.horizon_s, self.control_interval_s
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !self.reward_weight.is_finite() {
            return Err(Error::Config("reward_weight must be finite".into()));
        }
        self.hyperparameters.validate()
    }

    pub fn steps_per_episode(&self) -> usize {
        (self.horizon_s / self.control_interval_s) as usize
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn network(&self) -> Result<Arc<RoadNetwork>> {
        let net = match &self.roadnet {
            RoadnetSpec::Path(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                load_network(&text)?
            }
            RoadnetSpec::Inline(v) => load_network(&v.to_string())?,
        };
        Ok(Arc::new(net))
    }

    pub fn roadnet_document(&self) -> Result<RoadnetDocument> {
        match &self.roadnet {
            RoadnetSpec::Path(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                crate::netsim::parse_roadnet(&text)
            }
            RoadnetSpec::Inline(v) => crate::netsim::parse_roadnet(&v.to_string()),
        }
    }

    /// Arrival schedule of `flow` on `network` for one seed.
    pub fn schedule_for(&self, flow: &FlowSpec, network: &RoadNetwork, seed: u64) -> Result<Arc<ArrivalSchedule>> {
        let schedule = match flow {
            FlowSpec::MixedLow => {
                demand::build_mixed_with(MixedProfile::Low, network, self.horizon_s, seed, self.arrival_process)?
            }
            FlowSpec::MixedHigh => {
                demand::build_mixed_with(MixedProfile::High, network, self.horizon_s, seed, self.arrival_process)?
            }
            FlowSpec::Replay(p) | FlowSpec::Flow(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let doc = demand::parse_flow(&text)?;
                if matches!(flow, FlowSpec::Replay(_)) {
                    demand::build_replay(&doc, network, self.horizon_s)?
                } else {
                    demand::build_flow(&doc, network, self.horizon_s)?
                }
            }
        };
        Ok(Arc::new(schedule))
    }

    pub fn schedule(&self, network: &RoadNetwork, seed: u64) -> Result<Arc<ArrivalSchedule>> {
        self.schedule_for(&self.flow, network, seed)
    }
}
