//! Shared inputs for the benchmarks.

use ag4_core::data::{Dataset, GenerateOptions};
use ag4_core::model::{Model, ModelConfig};
use ag4_core::policy::{build_policy, ParamPolicy, Preset};
use ag4_core::rubric::{reference_sheets, ScoreSheet};
use ag4_core::Example;

pub struct Fixture {
    pub model: Model,
    pub policy: ParamPolicy,
    pub examples: Vec<Example>,
}

/// Reference toy model with `n_examples` synthetic pairs.
pub fn toy_fixture(n_examples: usize) -> Fixture {
    let cfg = ModelConfig::reference_toy();
    let policy = build_policy(&cfg, Preset::ArtGpt4).expect("reference config is valid");
    let examples = Dataset::synthetic(&GenerateOptions::for_model(0, n_examples, &cfg))
        .expect("synthetic data")
        .examples;
    let model = Model::init(cfg, 0).expect("reference config is valid");
    Fixture {
        model,
        policy,
        examples,
    }
}

/// The five reference sheets repeated `copies` times under distinct names.
pub fn many_sheets(copies: usize) -> Vec<ScoreSheet> {
    let base = reference_sheets();
    (0..copies)
        .flat_map(|i| {
            base.iter().map(move |s| ScoreSheet {
                model_name: format!("{}-{i}", s.model_name),
                ..s.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let f = toy_fixture(4);
        assert_eq!(f.examples.len(), 4);
        assert_eq!(f.policy.trainable_count(), 488);
        assert_eq!(many_sheets(3).len(), 15);
    }
}
