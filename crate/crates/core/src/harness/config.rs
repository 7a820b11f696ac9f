use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::WindowConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ndmath::AdamWConfig;
use crate::objectives::{init_bias, BiasMode, ContrastiveParams};
use crate::sim::{ObsConfig, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Team groups per batch.
    pub groups: usize,
    /// Agents kept per group.
    pub agents: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            epochs: 8,
            groups: 6,
            agents: 5,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.groups * self.agents
    }
}

/// Everything that determines a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Rounds simulated for the corpus.
    pub rounds: usize,
    pub sim: SimConfig,
    pub window: WindowConfig,
    /// Train / validation / test percentages.
    pub split: [u32; 3],
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub lambda: f64,
    pub t_init: f64,
    /// Initial contrastive bias; ignored when `bias_mode` is set.
    pub b_init: f64,
    /// Derive the initial bias from the batch shape instead of `b_init`.
    pub bias_mode: Option<BiasMode>,
    /// `false` pins the bias at its initial value.
    pub bias_trainable: bool,
    /// Zero the occupancy (leak) block of every frame.
    pub masked: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 45,
            sim: SimConfig::default(),
            window: WindowConfig::default(),
            split: [70, 15, 15],
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            lambda: 1.0,
            t_init: 10.0,
            b_init: -3.0,
            bias_mode: None,
            bias_trainable: true,
            masked: true,
        }
    }
}

/// Named starting points that a JSON document's `profile` key selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Reference,
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Profile::Reference),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    /// 30 short rounds at 16 ticks/s. The small corpus gives 29 batches per
    /// epoch, so the optimizer runs longer and faster than the reference.
    pub fn desk() -> Self {
        Self {
            rounds: 30,
            sim: SimConfig::desk(),
            optim: OptimConfig {
                lr: 3e-3,
                epochs: 40,
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Reference => Self::default(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Parses a JSON document: an optional `"profile"` key picks the base,
    /// remaining keys override it (nested objects merge key by key).
    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        let profile = match doc.as_object_mut().and_then(|o| o.remove("profile")) {
            None => Profile::Reference,
            Some(Value::String(s)) => Profile::parse(&s)?,
            Some(v) => return Err(Error::Config(format!("profile must be a string, got {v}"))),
        };
        let mut base = serde_json::to_value(Self::profile(profile))?;
        merge(&mut base, doc);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.window.validate()?;
        self.model.validate()?;
        let o = &self.optim;
        let bad = |m: String| Err(Error::Config(m));
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad(format!("optimizer settings out of range: {o:?}"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) || o.epochs == 0 {
            return bad(format!("optimizer settings out of range: {o:?}"));
        }
        if o.groups < 2 || !(1..=5).contains(&o.agents) {
            return bad(format!("batch needs >= 2 groups and 1..=5 agents, got {} x {}", o.groups, o.agents));
        }
        if let Some(&k) = self.model.pov_sizes.iter().find(|&&k| k > o.agents) {
            return bad(format!("pov size {k} exceeds agents per group {}", o.agents));
        }
        if self.split.iter().sum::<u32>() != 100 || self.split.contains(&0) {
            return bad(format!("split {:?} must be positive and sum to 100", self.split));
        }
        if self.rounds < 3 {
            return bad(format!("need at least 3 rounds, got {}", self.rounds));
        }
        if self.sim.duration_s < self.window.window_s {
            return bad("round shorter than one window".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        self.contrastive().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn contrastive(&self) -> Result<ContrastiveParams> {
        let b = match self.bias_mode {
            Some(mode) => init_bias(mode, self.optim.groups, self.optim.agents)?,
            None => self.b_init,
        };
        ContrastiveParams::new(self.t_init, b)
    }

    pub fn obs(&self) -> ObsConfig {
        ObsConfig {
            noise_std: self.sim.noise_std,
            vis_radius: self.sim.vis_radius,
            noise_seed: self.sim.seed,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_with_overrides() {
        let c = RunConfig::from_json(r#"{"profile": "desk", "seed": 4, "sim": {"flash_rate": 0.1}}"#).unwrap();
        assert_eq!(c.sim.tickrate, 16);
        assert_eq!(c.sim.flash_rate, 0.1);
        assert_eq!(c.seed, 4);
        assert_eq!(c.rounds, 30);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_json(r#"{"sede": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"optim": {"lr": -1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"split": [50, 50, 0]}"#).is_err());
        assert!(RunConfig::from_json("{").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.lambda = 0.0;
        assert_ne!(a.hash(), b.hash());
    }
}
