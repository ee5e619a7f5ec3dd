//! Finite-difference check of the full training loss against the tape.

use crate::data::{Dataset, Example, GenerateOptions};
use crate::model::{Model, ModelConfig};
use crate::policy::{build_policy, ParamPolicy, Preset};
use crate::tensor::{BackwardFault, Tape, Tensor};
use crate::train::{example_loss, Template, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero on
/// both sides compare as equal instead of 0/0.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Deliberately wrong backward rule, for negative controls.
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: REL_ERR_FLOOR,
            fault: None,
        }
    }
}

/// Worst scalar within one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub path: String,
    pub n_scalars: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn n_scalars(&self) -> usize {
        self.groups.iter().map(|g| g.n_scalars).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < tol)
    }

    pub fn render(&self, tol: f64) -> String {
        let w = self.groups.iter().map(|g| g.path.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<w$}  {:>7}  {:>12}  status\n", "path", "scalars", "max_rel_err");
        for g in &self.groups {
            let status = if g.max_rel_err < tol { "ok" } else { "FAIL" };
            out += &format!(
                "{:<w$}  {:>7}  {:>12.3e}  {status}\n",
                g.path, g.n_scalars, g.max_rel_err
            );
        }
        out += &format!(
            "{} scalars, max relative error {:.3e}, tolerance {tol:e}\n",
            self.n_scalars(),
            self.max_rel_err()
        );
        out
    }
}

fn mean_loss(
    model: &Model,
    tape: &mut Tape,
    trainable: &dyn Fn(&crate::model::ParamInfo) -> bool,
    examples: &[Example],
    template: &Template,
) -> Result<(crate::tensor::Var, crate::model::ModelWeights<crate::tensor::Var>), TrainError> {
    let w = model.bind(tape, trainable);
    let instr = match template {
        Template::Instruction { pool } => pool.first().map(Vec::as_slice),
        Template::Caption => None,
    };
    let mut losses = Vec::with_capacity(examples.len());
    for ex in examples {
        losses.push(example_loss(tape, &w, &model.config, ex, template, instr)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok((tape.scale(total, 1.0 / examples.len() as f64), w))
}

fn loss_value(model: &Model, examples: &[Example], template: &Template) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (l, _) = mean_loss(model, &mut tape, &|_| false, examples, template)?;
    Ok(tape.value(l).data()[0])
}

/// Compares tape gradients of the mean loss over `examples` with central
/// differences, for every scalar the policy marks trainable.
pub fn check_gradients(
    model: &Model,
    policy: &ParamPolicy,
    examples: &[Example],
    template: &Template,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut tape = match opts.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let (loss, w) = mean_loss(model, &mut tape, &|i| policy.allows(i), examples, template)?;
    let grads = tape.backward(loss)?;

    let mut probe = model.clone();
    let mut groups = Vec::new();
    for (info, var) in w.entries() {
        if !tape.requires_grad(*var) {
            continue;
        }
        let shape = tape.value(*var).shape().to_vec();
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(shape.clone()));
        let n = analytic.numel();
        let mut worst = GroupResult {
            path: info.path.clone(),
            n_scalars: n,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let orig = model.weights.get(&info.path).expect("bound from this model").data()[i];
            let set = |m: &mut Model, v: f64| m.weights.get_mut(&info.path).expect("known path").data_mut()[i] = v;
            set(&mut probe, orig + opts.step);
            let plus = loss_value(&probe, examples, template)?;
            set(&mut probe, orig - opts.step);
            let minus = loss_value(&probe, examples, template)?;
            set(&mut probe, orig);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, opts.floor);
            if err > worst.max_rel_err || i == 0 {
                worst.max_rel_err = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        groups.push(worst);
    }
    Ok(GradCheckReport { groups })
}

/// Reference toy model with every trainable parameter moved off its init,
/// so the adapter up path and norm gains carry signal, plus two examples.
pub fn reference_fixture(seed: u64) -> Result<(Model, ParamPolicy, Vec<Example>), TrainError> {
    perturbed_fixture(&ModelConfig::reference_toy(), Preset::ArtGpt4, seed)
}

/// Model for `cfg` with trainable parameters shifted by `U(-0.2, 0.2)`.
pub fn perturbed_fixture(
    cfg: &ModelConfig,
    preset: Preset,
    seed: u64,
) -> Result<(Model, ParamPolicy, Vec<Example>), TrainError> {
    let mut model = Model::init(cfg.clone(), seed)?;
    let policy = build_policy(cfg, preset).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AD_C4EC);
    for (info, t) in model.weights.entries_mut() {
        if policy.trainable(&info.path) {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    let data = Dataset::synthetic(&GenerateOptions::for_model(seed, 2, cfg))?;
    Ok((model, policy, data.examples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn small_model_passes_and_fault_fails() {
        let cfg = ModelConfig {
            n_blocks: 1,
            hidden: 8,
            n_heads: 2,
            mlp_inner: 8,
            ..ModelConfig::reference_toy()
        };
        let mut model = Model::init(cfg.clone(), 4).unwrap();
        if let Some(a) = &mut model.weights.blocks[0].adapter {
            a.w_up
                .data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.1 * (i % 5) as f64 - 0.2);
        }
        let policy = build_policy(&cfg, Preset::ArtGpt4).unwrap();
        let data = Dataset::synthetic(&GenerateOptions::for_model(1, 1, &cfg)).unwrap();
        let ok = check_gradients(&model, &policy, &data.examples, &Template::Caption, &Default::default()).unwrap();
        assert!(ok.passes(DEFAULT_TOLERANCE), "{}", ok.render(DEFAULT_TOLERANCE));
        assert_eq!(ok.n_scalars(), policy.trainable_count());
        let bad = check_gradients(
            &model,
            &policy,
            &data.examples,
            &Template::Caption,
            &GradCheckOptions {
                fault: Some(BackwardFault::GeluDerivative),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!bad.passes(DEFAULT_TOLERANCE));
    }
}
