use super::{ModelConfig, ModelError, PositionalMode};
use crate::adapter::{bottleneck_dim, AdapterWeights};
use crate::tensor::Tensor;
use crate::vision::{ProjectionWeights, VisionWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::convert::Infallible;

/// What a parameter is, independent of its path string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    TokenEmbedding,
    PositionEmbedding,
    AttnNorm { block: usize },
    Attention { block: usize },
    Adapter { block: usize },
    MlpNorm { block: usize },
    Mlp { block: usize },
    FinalNorm,
    Unembedding,
    VisionStub,
    Projection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub path: String,
    pub kind: ParamKind,
}

impl ParamInfo {
    fn new(path: impl Into<String>, kind: ParamKind) -> Self {
        Self {
            path: path.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T = Tensor> {
    pub norm_attn_gain: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    /// Present iff adapters are enabled.
    pub adapter: Option<AdapterWeights<T>>,
    pub norm_mlp_gain: T,
    pub w_gate: T,
    pub w_up_mlp: T,
    pub w_down_mlp: T,
}

/// Every parameter of the model. The field order below is the canonical
/// enumeration order used by policies and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T = Tensor> {
    pub token_embed: T,
    pub pos_embed: Option<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_norm_gain: T,
    pub unembed: T,
    pub vision: VisionWeights<T>,
    pub projection: ProjectionWeights<T>,
}

impl<T> BlockWeights<T> {
    fn try_map<'a, U, E>(
        &'a self,
        block: usize,
        f: &mut impl FnMut(&ParamInfo, &'a T) -> Result<U, E>,
    ) -> Result<BlockWeights<U>, E> {
        use ParamKind::*;
        let p = |s: &str| format!("blocks.{block}.{s}");
        let mut g = |name: &str, kind: ParamKind, t: &'a T| f(&ParamInfo::new(p(name), kind), t);
        Ok(BlockWeights {
            norm_attn_gain: g("norm_attn.gain", AttnNorm { block }, &self.norm_attn_gain)?,
            wq: g("attn.wq", Attention { block }, &self.wq)?,
            wk: g("attn.wk", Attention { block }, &self.wk)?,
            wv: g("attn.wv", Attention { block }, &self.wv)?,
            wo: g("attn.wo", Attention { block }, &self.wo)?,
            adapter: match &self.adapter {
                Some(a) => Some(AdapterWeights {
                    w_down: g("adapter.w_down", Adapter { block }, &a.w_down)?,
                    b_down: g("adapter.b_down", Adapter { block }, &a.b_down)?,
                    w_up: g("adapter.w_up", Adapter { block }, &a.w_up)?,
                    b_up: g("adapter.b_up", Adapter { block }, &a.b_up)?,
                }),
                None => None,
            },
            norm_mlp_gain: g("norm_mlp.gain", MlpNorm { block }, &self.norm_mlp_gain)?,
            w_gate: g("mlp.w_gate", Mlp { block }, &self.w_gate)?,
            w_up_mlp: g("mlp.w_up", Mlp { block }, &self.w_up_mlp)?,
            w_down_mlp: g("mlp.w_down", Mlp { block }, &self.w_down_mlp)?,
        })
    }

    fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut v = vec![
            &mut self.norm_attn_gain,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
        ];
        if let Some(a) = &mut self.adapter {
            v.extend([&mut a.w_down, &mut a.b_down, &mut a.w_up, &mut a.b_up]);
        }
        v.extend([
            &mut self.norm_mlp_gain,
            &mut self.w_gate,
            &mut self.w_up_mlp,
            &mut self.w_down_mlp,
        ]);
        v
    }
}

impl<T> ModelWeights<T> {
    /// Maps every parameter in canonical order.
    pub fn try_map<'a, U, E>(
        &'a self,
        mut f: impl FnMut(&ParamInfo, &'a T) -> Result<U, E>,
    ) -> Result<ModelWeights<U>, E> {
        use ParamKind::*;
        let token_embed = f(&ParamInfo::new("embed.tokens", TokenEmbedding), &self.token_embed)?;
        let pos_embed = match &self.pos_embed {
            Some(p) => Some(f(&ParamInfo::new("embed.positions", PositionEmbedding), p)?),
            None => None,
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            blocks.push(b.try_map(i, &mut f)?);
        }
        Ok(ModelWeights {
            token_embed,
            pos_embed,
            blocks,
            final_norm_gain: f(&ParamInfo::new("final_norm.gain", FinalNorm), &self.final_norm_gain)?,
            unembed: f(&ParamInfo::new("unembed", Unembedding), &self.unembed)?,
            vision: VisionWeights {
                encoder_weight: f(
                    &ParamInfo::new("vision.encoder.weight", VisionStub),
                    &self.vision.encoder_weight,
                )?,
                encoder_bias: f(
                    &ParamInfo::new("vision.encoder.bias", VisionStub),
                    &self.vision.encoder_bias,
                )?,
                queries: f(
                    &ParamInfo::new("vision.qformer.queries", VisionStub),
                    &self.vision.queries,
                )?,
            },
            projection: ProjectionWeights {
                weight: f(
                    &ParamInfo::new("projection.weight", Projection),
                    &self.projection.weight,
                )?,
                bias: f(&ParamInfo::new("projection.bias", Projection), &self.projection.bias)?,
            },
        })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&ParamInfo, &'a T) -> U) -> ModelWeights<U> {
        match self.try_map(|i, t| Ok::<_, Infallible>(f(i, t))) {
            Ok(w) => w,
            Err(e) => match e {},
        }
    }

    /// `(info, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(ParamInfo, &T)> {
        let mut out = Vec::new();
        self.map(|info, t| out.push((info.clone(), t)));
        out
    }

    /// Mutable access in canonical order.
    pub fn entries_mut(&mut self) -> Vec<(ParamInfo, &mut T)> {
        let infos: Vec<ParamInfo> = self.map(|i, _| i.clone()).into_infos();
        let mut refs: Vec<&mut T> = vec![&mut self.token_embed];
        if let Some(p) = &mut self.pos_embed {
            refs.push(p);
        }
        for b in &mut self.blocks {
            refs.extend(b.refs_mut());
        }
        refs.extend([
            &mut self.final_norm_gain,
            &mut self.unembed,
            &mut self.vision.encoder_weight,
            &mut self.vision.encoder_bias,
            &mut self.vision.queries,
            &mut self.projection.weight,
            &mut self.projection.bias,
        ]);
        debug_assert_eq!(infos.len(), refs.len());
        infos.into_iter().zip(refs).collect()
    }
}

impl ModelWeights<ParamInfo> {
    fn into_infos(self) -> Vec<ParamInfo> {
        self.entries().into_iter().map(|(i, _)| i).collect()
    }
}

impl ModelWeights<Tensor> {
    /// Bitwise equality of every parameter.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let a = self.entries();
        let b = other.entries();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((ia, ta), (ib, tb))| ia.path == ib.path && ta.bitwise_eq(tb))
    }

    pub fn numel(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries().into_iter().find(|(i, _)| i.path == path).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries_mut()
            .into_iter()
            .find(|(i, _)| i.path == path)
            .map(|(_, t)| t)
    }
}

/// Parameter shapes implied by a config.
pub fn layout(cfg: &ModelConfig) -> Result<ModelWeights<Vec<usize>>, ModelError> {
    cfg.validate()?;
    let h = cfg.hidden;
    let b = bottleneck_dim(h).map_err(|e| ModelError::Config(e.to_string()))?;
    let block = BlockWeights {
        norm_attn_gain: vec![h],
        wq: vec![h, h],
        wk: vec![h, h],
        wv: vec![h, h],
        wo: vec![h, h],
        adapter: cfg.adapters_enabled.then(|| AdapterWeights {
            w_down: vec![h, b],
            b_down: vec![b],
            w_up: vec![b, h],
            b_up: vec![h],
        }),
        norm_mlp_gain: vec![h],
        w_gate: vec![h, cfg.mlp_inner],
        w_up_mlp: vec![h, cfg.mlp_inner],
        w_down_mlp: vec![cfg.mlp_inner, h],
    };
    let v = &cfg.vision;
    Ok(ModelWeights {
        token_embed: vec![cfg.vocab_size, h],
        pos_embed: (cfg.positional_mode == PositionalMode::Absolute).then(|| vec![cfg.max_seq, h]),
        blocks: vec![block; cfg.n_blocks],
        final_norm_gain: vec![h],
        unembed: vec![h, cfg.vocab_size],
        vision: VisionWeights {
            encoder_weight: vec![v.patch_len(), v.vis_width],
            encoder_bias: vec![v.vis_width],
            queries: vec![v.n_query, v.vis_width],
        },
        projection: ProjectionWeights {
            weight: vec![v.vis_width, h],
            bias: vec![h],
        },
    })
}

/// Seeded initialization.
///
/// Decoder weights, adapter weights and the projection draw from separate
/// streams of the same seed, so toggling adapters leaves every other
/// parameter bitwise unchanged. Vision stubs come from `vision.stub_seed`.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    let shapes = layout(cfg)?;
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let (mut base, mut adapters, mut proj) = (stream(0), stream(1), stream(2));
    let vision = VisionWeights::init(&cfg.vision).map_err(|e| ModelError::Config(e.to_string()))?;
    let h = cfg.hidden as f64;

    fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("layout shape")
    }

    shapes.try_map(|info, shape| {
        use ParamKind::*;
        let t = match info.kind {
            TokenEmbedding => uniform(&mut base, shape, 1.0),
            PositionEmbedding => uniform(&mut base, shape, 0.5),
            AttnNorm { .. } | MlpNorm { .. } | FinalNorm => Tensor::ones(shape.clone()),
            Attention { .. } => uniform(&mut base, shape, 1.0 / h.sqrt()),
            Mlp { .. } => uniform(&mut base, shape, 1.0 / (shape[0] as f64).sqrt()),
            Adapter { .. } if info.path.ends_with("w_down") => uniform(&mut adapters, shape, 1.0 / h.sqrt()),
            Adapter { .. } => Tensor::zeros(shape.clone()),
            Unembedding => uniform(&mut base, shape, 6.0 / h.sqrt()),
            VisionStub => match info.path.as_str() {
                "vision.encoder.weight" => vision.encoder_weight.clone(),
                "vision.encoder.bias" => vision.encoder_bias.clone(),
                _ => vision.queries.clone(),
            },
            Projection if info.path.ends_with("weight") => uniform(&mut proj, shape, 1.0 / (shape[0] as f64).sqrt()),
            Projection => Tensor::zeros(shape.clone()),
        };
        Ok(t)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_unique_and_ordered() {
        let w = layout(&ModelConfig::reference_toy()).unwrap();
        let paths: Vec<String> = w.entries().into_iter().map(|(i, _)| i.path).collect();
        let mut dedup = paths.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), paths.len());
        assert_eq!(paths[0], "embed.tokens");
        assert_eq!(paths[1], "blocks.0.norm_attn.gain");
        assert_eq!(paths.last().unwrap(), "projection.bias");
    }

    #[test]
    fn entries_mut_matches_entries() {
        let mut cfg = ModelConfig::reference_toy();
        cfg.positional_mode = PositionalMode::Absolute;
        let mut w = init_weights(&cfg, 1).unwrap();
        let names: Vec<_> = w
            .entries()
            .into_iter()
            .map(|(i, t)| (i.path, t.shape().to_vec()))
            .collect();
        let names_mut: Vec<_> = w
            .entries_mut()
            .into_iter()
            .map(|(i, t)| (i.path, t.shape().to_vec()))
            .collect();
        assert_eq!(names, names_mut);
    }

    #[test]
    fn adapters_do_not_shift_base_init() {
        let with = init_weights(&ModelConfig::reference_toy(), 9).unwrap();
        let mut cfg = ModelConfig::reference_toy();
        cfg.adapters_enabled = false;
        let without = init_weights(&cfg, 9).unwrap();
        for (info, t) in without.entries() {
            assert!(with.get(&info.path).unwrap().bitwise_eq(t), "{}", info.path);
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::reference_toy();
        assert!(init_weights(&cfg, 3)
            .unwrap()
            .bitwise_eq(&init_weights(&cfg, 3).unwrap()));
        assert!(!init_weights(&cfg, 3)
            .unwrap()
            .bitwise_eq(&init_weights(&cfg, 4).unwrap()));
    }
}
