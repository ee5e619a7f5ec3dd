//! Per-parameter trainability.
//!
//! `artgpt4` trains every adapter, every pre-MLP norm gain, the pre-attention
//! norm gain of odd 1-based blocks (N = 1, 3, 5, ...) and the vision
//! projection. `minigpt4` trains the projection only. Everything else stays
//! frozen in both.

use crate::model::{layout, ModelConfig, ModelError, ModelWeights, ParamInfo, ParamKind};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[serde(rename = "artgpt4")]
    ArtGpt4,
    #[serde(rename = "minigpt4")]
    MiniGpt4,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::ArtGpt4 => "artgpt4",
            Preset::MiniGpt4 => "minigpt4",
        })
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "artgpt4" => Ok(Preset::ArtGpt4),
            "minigpt4" => Ok(Preset::MiniGpt4),
            other => Err(format!("unknown preset `{other}` (expected artgpt4 or minigpt4)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("parameter path mismatch at `{0}`")]
    PathMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl PolicyEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Trainable flag for every parameter path, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPolicy {
    preset: Preset,
    entries: IndexMap<String, PolicyEntry>,
}

/// The rule itself, on parameter kinds.
pub fn is_trainable(kind: ParamKind, preset: Preset) -> bool {
    match preset {
        Preset::MiniGpt4 => kind == ParamKind::Projection,
        Preset::ArtGpt4 => match kind {
            ParamKind::Adapter { .. } | ParamKind::MlpNorm { .. } | ParamKind::Projection => true,
            // block index is 0-based; N = index + 1 odd
            ParamKind::AttnNorm { block } => block % 2 == 0,
            _ => false,
        },
    }
}

pub fn build_policy(config: &ModelConfig, preset: Preset) -> Result<ParamPolicy, PolicyError> {
    let shapes = layout(config)?;
    let entries = shapes
        .entries()
        .into_iter()
        .map(|(info, shape)| {
            let e = PolicyEntry {
                trainable: is_trainable(info.kind, preset),
                path: info.path.clone(),
                shape: shape.clone(),
            };
            (info.path, e)
        })
        .collect();
    Ok(ParamPolicy { preset, entries })
}

impl ParamPolicy {
    pub fn preset(&self) -> Preset {
        self.preset
    }

    pub fn entries(&self) -> impl Iterator<Item = &PolicyEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unknown paths are frozen.
    pub fn trainable(&self, path: &str) -> bool {
        self.entries.get(path).is_some_and(|e| e.trainable)
    }

    pub fn allows(&self, info: &ParamInfo) -> bool {
        self.trainable(&info.path)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries().filter(|e| e.trainable).map(PolicyEntry::numel).sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries().map(PolicyEntry::numel).sum()
    }

    /// Checks that the policy names exactly the parameters of `weights`,
    /// with matching shapes.
    pub fn check_covers(&self, weights: &ModelWeights<Tensor>) -> Result<(), PolicyError> {
        let params = weights.entries();
        if params.len() != self.entries.len() {
            let missing = params
                .iter()
                .map(|(i, _)| i.path.clone())
                .find(|p| !self.entries.contains_key(p))
                .or_else(|| {
                    self.entries
                        .keys()
                        .find(|k| params.iter().all(|(i, _)| &i.path != *k))
                        .cloned()
                })
                .unwrap_or_default();
            return Err(PolicyError::PathMismatch(missing));
        }
        for ((info, t), e) in params.iter().zip(self.entries.values()) {
            if info.path != e.path || t.shape() != e.shape.as_slice() {
                return Err(PolicyError::PathMismatch(info.path.clone()));
            }
        }
        Ok(())
    }

    /// Aligned text table: path, shape, flag, then subtotals.
    pub fn render_table(&self) -> String {
        let width = self.entries.keys().map(String::len).max().unwrap_or(4).max(4);
        let mut out = format!(
            "preset: {}\n{:<width$}  {:<12}  {:>7}  trainable\n",
            self.preset, "path", "shape", "numel"
        );
        for e in self.entries() {
            let shape = e.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            out.push_str(&format!(
                "{:<width$}  {:<12}  {:>7}  {}\n",
                e.path,
                shape,
                e.numel(),
                if e.trainable { "yes" } else { "no" }
            ));
        }
        let trainable = self.trainable_count();
        let total = self.total_count();
        out.push_str(&format!(
            "trainable: {trainable}\nfrozen: {}\ntotal: {total}\n",
            total - trainable
        ));
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "preset": self.preset,
            "entries": self.entries().collect::<Vec<_>>(),
            "trainable": self.trainable_count(),
            "frozen": self.total_count() - self.trainable_count(),
            "total": self.total_count(),
        })
    }
}

/// True iff every frozen parameter is bitwise identical in both snapshots.
pub fn assert_frozen_unchanged(
    before: &ModelWeights<Tensor>,
    after: &ModelWeights<Tensor>,
    policy: &ParamPolicy,
) -> Result<bool, PolicyError> {
    policy.check_covers(before)?;
    policy.check_covers(after)?;
    let unchanged = before
        .entries()
        .into_iter()
        .zip(after.entries())
        .filter(|((info, _), _)| !policy.trainable(&info.path))
        .all(|((_, a), (_, b))| a.bitwise_eq(b));
    Ok(unchanged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn four_block() -> ModelConfig {
        ModelConfig {
            n_blocks: 4,
            ..ModelConfig::reference_toy()
        }
    }

    // Enumeration oracle: walk every scalar of a constructed model and sum
    // those whose kind the rule marks trainable.
    fn enumerate(cfg: &ModelConfig, preset: Preset) -> usize {
        let m = Model::init(cfg.clone(), 0).unwrap();
        let mut n = 0;
        for (info, t) in m.weights.entries() {
            for _ in t.data() {
                if is_trainable(info.kind, preset) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn artgpt4_reference_count() {
        let p = build_policy(&four_block(), Preset::ArtGpt4).unwrap();
        assert_eq!(enumerate(&four_block(), Preset::ArtGpt4), 832);
        assert_eq!(p.trainable_count(), 832);
    }

    #[test]
    fn minigpt4_trains_projection_only() {
        let p = build_policy(&four_block(), Preset::MiniGpt4).unwrap();
        assert_eq!(p.trainable_count(), 144);
        let names: Vec<_> = p.entries().filter(|e| e.trainable).map(|e| e.path.as_str()).collect();
        assert_eq!(names, ["projection.weight", "projection.bias"]);
    }

    #[test]
    fn single_block_attn_norm_is_trainable() {
        let cfg = ModelConfig {
            n_blocks: 1,
            ..ModelConfig::reference_toy()
        };
        let p = build_policy(&cfg, Preset::ArtGpt4).unwrap();
        assert!(p.trainable("blocks.0.norm_attn.gain"));
    }

    #[test]
    fn odd_block_rule() {
        for n in 1..=7 {
            let cfg = ModelConfig {
                n_blocks: n,
                ..ModelConfig::reference_toy()
            };
            let p = build_policy(&cfg, Preset::ArtGpt4).unwrap();
            let k = (0..n)
                .filter(|b| p.trainable(&format!("blocks.{b}.norm_attn.gain")))
                .count();
            assert_eq!(k, n.div_ceil(2));
        }
    }

    #[test]
    fn attention_and_mlp_stay_frozen() {
        let p = build_policy(&four_block(), Preset::ArtGpt4).unwrap();
        for e in p.entries() {
            if e.path.contains(".attn.") || e.path.contains(".mlp.") || e.path.starts_with("embed") {
                assert!(!e.trainable, "{}", e.path);
            }
        }
        assert!(!p.trainable("unembed"));
        assert!(!p.trainable("final_norm.gain"));
        assert!(!p.trainable("vision.qformer.queries"));
    }

    #[test]
    fn policy_covers_model_exactly() {
        let cfg = four_block();
        let m = Model::init(cfg.clone(), 1).unwrap();
        let p = build_policy(&cfg, Preset::ArtGpt4).unwrap();
        p.check_covers(&m.weights).unwrap();
        let other = Model::init(ModelConfig::reference_toy(), 1).unwrap();
        assert!(p.check_covers(&other.weights).is_err());
    }

    #[test]
    fn frozen_snapshot_comparison() {
        let cfg = ModelConfig::reference_toy();
        let m = Model::init(cfg.clone(), 1).unwrap();
        let p = build_policy(&cfg, Preset::ArtGpt4).unwrap();
        assert!(assert_frozen_unchanged(&m.weights, &m.weights.clone(), &p).unwrap());

        let mut trained = m.weights.clone();
        trained.projection.weight.data_mut()[0] += 1.0;
        assert!(assert_frozen_unchanged(&m.weights, &trained, &p).unwrap());

        let mut tampered = m.weights.clone();
        tampered.blocks[1].wq.data_mut()[3] += 1e-12;
        assert!(!assert_frozen_unchanged(&m.weights, &tampered, &p).unwrap());

        let other = Model::init(four_block(), 1).unwrap();
        assert!(matches!(
            assert_frozen_unchanged(&m.weights, &other.weights, &p),
            Err(PolicyError::PathMismatch(_))
        ));
    }

    #[test]
    fn table_and_json_report_counts() {
        let p = build_policy(&four_block(), Preset::ArtGpt4).unwrap();
        let table = p.render_table();
        assert!(table.contains("trainable: 832"));
        assert!(table.contains("blocks.0.adapter.w_down"));
        let j = p.to_json();
        assert_eq!(j["trainable"], 832);
        assert_eq!(j["preset"], "artgpt4");
    }
}
