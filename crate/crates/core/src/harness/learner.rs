use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Hyperparameters, Variant};
use crate::agent::{Policy, PolicyConfig};
use crate::belief::{Encoder, EncoderConfig};
use crate::diffnet::{Checkpoint, ParamStore};
use crate::worldmodel::{DecoderConfig, DecoderSet};
use crate::{Error, Result};

/// Encoder and (during training) decoders, optimized together.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoders: Option<DecoderSet>,
}

/// Architecture record kept in checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: Variant,
    pub policy: PolicyConfig,
    pub encoder: Option<EncoderConfig>,
    pub decoder: Option<DecoderConfig>,
}

/// Everything one MetaVIM agent learns. The policy and the VAE live in
/// separate stores with separate optimizer state, so the PPO loss never
/// reaches the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub variant: Variant,
    pub policy_store: ParamStore,
    pub policy: Policy,
    pub vae: Option<VaeModel>,
}

impl Learner {
    pub fn new(variant: Variant, hyper: &Hyperparameters, seed: u64) -> Result<Self> {
        if variant.is_classical() {
            return Err(Error::Config(format!("`{variant}` is not a learned variant")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy_store = ParamStore::new();
        let policy = Policy::new(&mut policy_store, hyper.policy(), &mut rng)?;
        let vae = if variant.uses_latent() {
            let mut store = ParamStore::new();
            let encoder = Encoder::new(&mut store, hyper.encoder(), &mut rng)?;
            let decoders = DecoderSet::new(&mut store, &hyper.decoder(), false, &mut rng)?;
            Some(VaeModel {
                store,
                encoder,
                decoders: Some(decoders),
            })
        } else {
            None
        };
        Ok(Learner {
            variant,
            policy_store,
            policy,
            vae,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.policy.config.latent
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            variant: self.variant,
            policy: self.policy.config.clone(),
            encoder: self.vae.as_ref().map(|v| v.encoder.config),
            decoder: self.vae.as_ref().and_then(|v| {
                v.decoders.as_ref().map(|d| DecoderConfig {
                    hidden: d.reward_self.hidden_sizes(),
                    latent: d.latent,
                })
            }),
        }
    }

    /// Combined checksum of every parameter value.
    pub fn checksum(&self) -> u64 {
        let vae = self.vae.as_ref().map_or(0, |v| v.store.checksum());
        self.policy_store.checksum() ^ vae.rotate_left(1)
    }

    /// Parameters plus `extra` metadata merged next to the architecture.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut meta = serde_json::json!({ "architecture": self.architecture() });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra) {
            m.extend(extra);
        }
        let mut ckpt = Checkpoint::new(meta);
        ckpt.add_store(&self.policy_store)?;
        if let Some(v) = &self.vae {
            ckpt.add_store(&v.store)?;
        }
        Ok(ckpt)
    }

    /// Rebuild from a checkpoint. Decoders are loaded when present; a
    /// latent variant without encoder parameters is an error.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch: Architecture = serde_json::from_value(
            ckpt.meta
                .get("architecture")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing architecture metadata".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad architecture metadata: {e}")))?;
        for prefix in [Policy::ACTOR_PREFIX, Policy::CRITIC_PREFIX] {
            if !ckpt.has_prefix(prefix) {
                return Err(Error::Checkpoint(format!("checkpoint has no `{prefix}` parameters")));
            }
        }
        let policy_store = ckpt.to_store(&[Policy::ACTOR_PREFIX, Policy::CRITIC_PREFIX])?;
        let policy = Policy::bind(&policy_store, arch.policy.clone())?;
        let vae = if arch.variant.uses_latent() {
            if !ckpt.has_prefix(Encoder::PREFIX) {
                return Err(Error::Checkpoint("checkpoint has no encoder parameters".into()));
            }
            let with_decoders = ckpt.has_prefix(DecoderSet::PREFIX);
            let prefixes: &[&str] = if with_decoders {
                &[Encoder::PREFIX, DecoderSet::PREFIX]
            } else {
                &[Encoder::PREFIX]
            };
            let store = ckpt.to_store(prefixes)?;
            let enc_cfg = match arch.encoder {
                Some(c) => c,
                None => Encoder::infer_config(&store)?,
            };
            let encoder = Encoder::bind(&store, enc_cfg)?;
            let decoders = match (&arch.decoder, with_decoders) {
                (Some(cfg), true) => Some(DecoderSet::bind(&store, cfg)?),
                _ => None,
            };
            Some(VaeModel {
                store,
                encoder,
                decoders,
            })
        } else {
            None
        };
        if let Some(v) = &vae {
            if v.encoder.config.latent != policy.config.latent {
                return Err(Error::Checkpoint(format!(
                    "encoder latent {} does not match policy latent {}",
                    v.encoder.config.latent, policy.config.latent
                )));
            }
        }
        Ok(Learner {
            variant: arch.variant,
            policy_store,
            policy,
            vae,
        })
    }

    /// Copy without decoder heads, as used at test time.
    pub fn without_decoders(&self) -> Result<Learner> {
        let mut out = self.clone();
        if let Some(v) = &mut out.vae {
            let ckpt = {
                let mut c = Checkpoint::new(serde_json::Value::Null);
                c.add_store(&v.store)?;
                c
            };
            v.store = ckpt.to_store(&[Encoder::PREFIX])?;
            v.encoder = Encoder::bind(&v.store, v.encoder.config)?;
            v.decoders = None;
        }
        Ok(out)
    }
}
