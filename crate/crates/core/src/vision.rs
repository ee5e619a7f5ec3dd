//! Frozen vision stand-ins and the trainable bridge into the decoder.
//!
//! Pixels → 4×4 patches → frozen linear patch encoder → one frozen
//! cross-attention of learned queries over the patches → affine projection
//! to the decoder width. Only the projection is ever trained.

use crate::tensor::{matmul, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 8] = b"AG4FEAT1";

/// Number of distinct synthetic pattern families.
pub const PATTERN_FAMILIES: usize = 8;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("pixel grid must be {expected}x{expected}, got shape {actual:?}")]
    PixelGrid { expected: usize, actual: Vec<usize> },
    #[error("{0}")]
    Config(String),
    #[error("feature file: {0}")]
    FeatureFormat(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub vis_width: usize,
    pub n_query: usize,
    /// Seeds the frozen encoder and queries independently of the decoder.
    pub stub_seed: u64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_side: 4,
            vis_width: 8,
            n_query: 4,
            stub_seed: 0x5717_B0B5,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<(), VisionError> {
        if self.patch_side == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return Err(VisionError::Config(format!(
                "image side {} is not a multiple of patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.vis_width == 0 || self.n_query == 0 {
            return Err(VisionError::Config("vis_width and n_query must be positive".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_side;
        per_side * per_side
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }
}

/// Frozen encoder and Q-Former query parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionWeights<T = Tensor> {
    /// `[patch_len × vis_width]`
    pub encoder_weight: T,
    pub encoder_bias: T,
    /// `[n_query × vis_width]`
    pub queries: T,
}

impl VisionWeights<Tensor> {
    /// Seeded from `cfg.stub_seed`; the encoder bias is zero.
    pub fn init(cfg: &VisionConfig) -> Result<Self, VisionError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.stub_seed);
        let bound = 1.0 / (cfg.patch_len() as f64).sqrt();
        let w = (0..cfg.patch_len() * cfg.vis_width)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let q = (0..cfg.n_query * cfg.vis_width)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Ok(Self {
            encoder_weight: Tensor::matrix(cfg.patch_len(), cfg.vis_width, w)?,
            encoder_bias: Tensor::zeros(vec![cfg.vis_width]),
            queries: Tensor::matrix(cfg.n_query, cfg.vis_width, q)?,
        })
    }
}

/// Trainable affine bridge `vis_width → hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<T = Tensor> {
    /// `[vis_width × hidden]`
    pub weight: T,
    pub bias: T,
}

impl ProjectionWeights<Tensor> {
    pub fn init(vis_width: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self, TensorError> {
        let bound = 1.0 / (vis_width as f64).sqrt();
        let w = (0..vis_width * hidden)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Self {
            weight: Tensor::matrix(vis_width, hidden, w)?,
            bias: Tensor::zeros(vec![hidden]),
        })
    }
}

/// Fixed-count visual tokens out of the Q-Former stub, `[n_query × vis_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens(pub Tensor);

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub pixels: Tensor,
    pub class_id: usize,
    pub intensity_id: usize,
}

impl SyntheticImage {
    /// Renders pattern family `class_id` at amplitude
    /// `(intensity_id + 1) / n_levels` on a `side × side` grid.
    pub fn render(class_id: usize, intensity_id: usize, n_levels: usize, side: usize) -> Result<Self, VisionError> {
        if class_id >= PATTERN_FAMILIES || intensity_id >= n_levels {
            return Err(VisionError::Config(format!(
                "class {class_id} / level {intensity_id} outside {PATTERN_FAMILIES} families x {n_levels} levels"
            )));
        }
        let amp = (intensity_id + 1) as f64 / n_levels as f64;
        let last = (side.max(2) - 1) as f64;
        let centre = last / 2.0;
        let mut data = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let on = |b: bool| if b { 1.0 } else { 0.0 };
                let p = match class_id {
                    0 => on((y / 2) % 2 == 0),
                    1 => on((x / 2) % 2 == 0),
                    2 => on((x / 4 + y / 4) % 2 == 0),
                    3 => on(((x + y) / 3) % 2 == 0),
                    4 => {
                        let (dx, dy) = (x as f64 - centre, y as f64 - centre);
                        on(dx * dx + dy * dy < (side as f64 / 3.0).powi(2))
                    }
                    5 => x as f64 / last,
                    6 => y as f64 / last,
                    _ => on(x < 2 || y < 2 || x + 2 >= side || y + 2 >= side),
                };
                data.push(amp * p);
            }
        }
        Ok(Self {
            pixels: Tensor::matrix(side, side, data)?,
            class_id,
            intensity_id,
        })
    }
}

/// Splits the pixel grid into non-overlapping patches (row-major patch
/// order, row-major pixels inside a patch) and applies the frozen encoder.
/// Returns `[n_patches × vis_width]`.
pub fn encode_image(pixels: &Tensor, stub: &VisionWeights, cfg: &VisionConfig) -> Result<Tensor, VisionError> {
    let side = cfg.image_side;
    if pixels.shape() != [side, side] {
        return Err(VisionError::PixelGrid {
            expected: side,
            actual: pixels.shape().to_vec(),
        });
    }
    let ps = cfg.patch_side;
    let per_side = side / ps;
    let mut patches = Vec::with_capacity(side * side);
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..ps {
                for x in 0..ps {
                    patches.push(pixels.at(py * ps + y, px * ps + x));
                }
            }
        }
    }
    let patches = Tensor::matrix(cfg.n_patches(), cfg.patch_len(), patches)?;
    let mut feats = matmul(&patches, &stub.encoder_weight)?;
    let width = feats.cols();
    let bias = stub.encoder_bias.data().to_vec();
    for (i, v) in feats.data_mut().iter_mut().enumerate() {
        *v += bias[i % width];
    }
    Ok(feats)
}

/// Frozen cross-attention of each query over the patch features, scaled by
/// `1/sqrt(vis_width)`. Gradients never reach the queries or features.
pub fn qformer_on(tape: &mut Tape, features: Var, queries: Var) -> Result<Var, TensorError> {
    let (_, width) = tape.value(features).matrix_dims("qformer")?;
    let (_, qwidth) = tape.value(queries).matrix_dims("qformer")?;
    if width != qwidth {
        return Err(crate::tensor::shape_err(
            "qformer",
            format!("features width {width} vs query width {qwidth}"),
        ));
    }
    let ft = tape.transpose(features)?;
    let scores = tape.matmul(queries, ft)?;
    let scores = tape.scale(scores, 1.0 / (width as f64).sqrt());
    let attn = tape.softmax_rows(scores, false)?;
    tape.matmul(attn, features)
}

pub fn qformer_stub(features: &Tensor, queries: &Tensor) -> Result<VisualTokens, TensorError> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let q = tape.constant(queries.clone());
    let out = qformer_on(&mut tape, f, q)?;
    Ok(VisualTokens(tape.value(out).clone()))
}

pub fn project_on(tape: &mut Tape, tokens: Var, proj: &ProjectionWeights<Var>) -> Result<Var, TensorError> {
    let y = tape.matmul(tokens, proj.weight)?;
    tape.add_row(y, proj.bias)
}

pub fn project_visual(vt: &VisualTokens, proj: &ProjectionWeights) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let t = tape.constant(vt.0.clone());
    let p = ProjectionWeights {
        weight: tape.constant(proj.weight.clone()),
        bias: tape.constant(proj.bias.clone()),
    };
    let out = project_on(&mut tape, t, &p)?;
    Ok(tape.value(out).clone())
}

/// Serializes a matrix as `AG4FEAT1`, `u32` rows, `u32` cols, then
/// little-endian `f64` values in row-major order.
pub fn encode_features(t: &Tensor) -> Result<Vec<u8>, VisionError> {
    let (r, c) = t.matrix_dims("encode_features")?;
    let dim = |d: usize| u32::try_from(d).map_err(|_| VisionError::FeatureFormat(format!("dimension {d} exceeds u32")));
    let mut out = Vec::with_capacity(16 + t.numel() * 8);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&dim(r)?.to_le_bytes());
    out.extend_from_slice(&dim(c)?.to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor, VisionError> {
    if bytes.len() < 16 {
        return Err(VisionError::FeatureFormat(format!(
            "{} bytes is shorter than the 16-byte header",
            bytes.len()
        )));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(VisionError::FeatureFormat("bad magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| VisionError::FeatureFormat("dimension overflow".into()))?;
    if body.len() != expected {
        return Err(VisionError::FeatureFormat(format!(
            "{rows}x{cols} needs {expected} data bytes, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<(), VisionError> {
    fs::write(path, encode_features(t)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor, VisionError> {
    decode_features(&fs::read(path)?)
}
