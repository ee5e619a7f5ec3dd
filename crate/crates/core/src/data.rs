//! Deterministic synthetic image–caption corpus and its JSON Lines manifest.

use crate::model::ModelConfig;
use crate::tensor::Tensor;
use crate::vision::{
    encode_image, read_features, write_features, SyntheticImage, VisionConfig, VisionError, VisionWeights,
    PATTERN_FAMILIES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
/// Tokens before the class block.
pub const N_SPECIAL: usize = 2;

/// Word tokens used by the stage-2 instruction pool.
pub const INSTRUCTION_WORDS: [&str; 8] = ["describe", "this", "image", "what", "is", "shown", "caption", "picture"];

/// Stage-2 instructions as indices into [`INSTRUCTION_WORDS`].
pub const INSTRUCTION_POOL: [[usize; 3]; 4] = [
    [0, 1, 2], // describe this image
    [3, 4, 5], // what is shown
    [6, 1, 7], // caption this picture
    [0, 1, 7], // describe this picture
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("token space too small: need {needed} ids, vocabulary has {vocab}")]
    TokenSpace { needed: usize, vocab: usize },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("item `{id}`: duplicate id")]
    DuplicateId { id: String },
    #[error("item `{id}`: token {token} is out of range for vocabulary size {vocab}")]
    TokenRange { id: String, token: usize, vocab: usize },
    #[error("item `{id}`: feature file {path} does not exist")]
    MissingFeatures { id: String, path: PathBuf },
    #[error("item `{id}`: {source}")]
    Features {
        id: String,
        #[source]
        source: VisionError,
    },
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Token id layout: `BOS`, `EOS`, class tokens, level tokens, then
/// instruction words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_classes: usize,
    pub n_levels: usize,
}

impl Vocab {
    pub fn class_token(&self, class_id: usize) -> usize {
        N_SPECIAL + class_id
    }

    pub fn level_token(&self, level: usize) -> usize {
        N_SPECIAL + self.n_classes + level
    }

    pub fn word_token(&self, word: usize) -> usize {
        N_SPECIAL + self.n_classes + self.n_levels + word
    }

    /// Ids needed for captions and instructions.
    pub fn required_size(&self) -> usize {
        self.word_token(INSTRUCTION_WORDS.len())
    }

    pub fn caption(&self, class_id: usize, level: usize) -> Vec<usize> {
        vec![BOS, self.class_token(class_id), self.level_token(level), EOS]
    }

    pub fn instruction(&self, index: usize) -> Vec<usize> {
        INSTRUCTION_POOL[index].iter().map(|&w| self.word_token(w)).collect()
    }

    pub fn instruction_pool(&self) -> Vec<Vec<usize>> {
        (0..INSTRUCTION_POOL.len()).map(|i| self.instruction(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Stage1,
    Stage2,
}

/// One manifest line. Field order fixes the JSON key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub feature_file: PathBuf,
    pub caption_tokens: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub n_items: usize,
    pub n_classes: usize,
    pub n_levels: usize,
    pub vocab_size: usize,
    /// Extra stage-2 entries reusing the first stage-1 images.
    pub stage2_items: usize,
    pub vision: VisionConfig,
}

impl GenerateOptions {
    pub fn new(seed: u64, n_items: usize) -> Self {
        Self {
            seed,
            n_items,
            n_classes: 4,
            n_levels: 4,
            vocab_size: 32,
            stage2_items: 0,
            vision: VisionConfig::default(),
        }
    }

    pub fn for_model(seed: u64, n_items: usize, cfg: &ModelConfig) -> Self {
        Self {
            vocab_size: cfg.vocab_size,
            vision: cfg.vision.clone(),
            ..Self::new(seed, n_items)
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_classes: self.n_classes,
            n_levels: self.n_levels,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_items == 0 {
            return Err(DataError::Invalid("n_items must be positive".into()));
        }
        if self.n_classes == 0 || self.n_levels == 0 || self.n_classes * self.n_levels < 2 {
            return Err(DataError::Invalid(
                "need at least two (class, level) combinations".into(),
            ));
        }
        if self.n_classes > PATTERN_FAMILIES {
            return Err(DataError::Invalid(format!(
                "at most {PATTERN_FAMILIES} classes are supported"
            )));
        }
        if self.stage2_items > self.n_items {
            return Err(DataError::Invalid("stage2_items exceeds n_items".into()));
        }
        let needed = self.vocab().required_size();
        if needed > self.vocab_size {
            return Err(DataError::TokenSpace {
                needed,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// A generated item before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedItem {
    pub item: ManifestItem,
    pub image: SyntheticImage,
    pub features: Tensor,
}

/// Draws (class, level) for item `i` from the seeded stream.
pub fn draw_labels(seed: u64, n_items: usize, n_classes: usize, n_levels: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_items)
        .map(|_| (rng.random_range(0..n_classes), rng.random_range(0..n_levels)))
        .collect()
}

/// Pure in-memory generation; [`generate_dataset`] writes the result.
pub fn generate_items(opts: &GenerateOptions) -> Result<Vec<GeneratedItem>, DataError> {
    opts.validate()?;
    let stub = VisionWeights::init(&opts.vision)?;
    let vocab = opts.vocab();
    let mut out = Vec::with_capacity(opts.n_items + opts.stage2_items);
    for (i, (class_id, level)) in draw_labels(opts.seed, opts.n_items, opts.n_classes, opts.n_levels)
        .into_iter()
        .enumerate()
    {
        let image = SyntheticImage::render(class_id, level, opts.n_levels, opts.vision.image_side)?;
        let features = encode_image(&image.pixels, &stub, &opts.vision)?;
        out.push(GeneratedItem {
            item: ManifestItem {
                id: format!("item-{i:05}"),
                feature_file: PathBuf::from(format!("features/item-{i:05}.feat")),
                caption_tokens: vocab.caption(class_id, level),
                split: Split::Stage1,
            },
            image,
            features,
        });
    }
    for i in 0..opts.stage2_items {
        let src = out[i].clone();
        out.push(GeneratedItem {
            item: ManifestItem {
                id: format!("chat-{i:05}"),
                split: Split::Stage2,
                ..src.item
            },
            ..src
        });
    }
    Ok(out)
}

/// Writes `manifest.jsonl` and `features/*.feat` under `out_dir`.
pub fn generate_dataset(opts: &GenerateOptions, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    let items = generate_items(opts)?;
    fs::create_dir_all(out_dir.join("features"))?;
    for g in items.iter().filter(|g| g.item.split == Split::Stage1) {
        write_features(&out_dir.join(&g.item.feature_file), &g.features)?;
    }
    let manifest = DatasetManifest {
        items: items.into_iter().map(|g| g.item).collect(),
    };
    write_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

pub fn manifest_to_string(m: &DatasetManifest) -> String {
    let mut s = String::new();
    for item in &m.items {
        s.push_str(&serde_json::to_string(item).expect("manifest items serialize"));
        s.push('\n');
    }
    s
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(manifest_to_string(m).as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Parses and validates a manifest: unique ids, tokens below `vocab_size`,
/// every feature file present.
pub fn load_manifest(path: &Path, vocab_size: usize) -> Result<DatasetManifest, DataError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = io::BufReader::new(fs::File::open(path)?);
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ManifestItem = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(item.id.clone()) {
            return Err(DataError::DuplicateId { id: item.id });
        }
        if let Some(&token) = item.caption_tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(DataError::TokenRange {
                id: item.id,
                token,
                vocab: vocab_size,
            });
        }
        let full = base.join(&item.feature_file);
        if !full.is_file() {
            return Err(DataError::MissingFeatures {
                id: item.id,
                path: full,
            });
        }
        items.push(item);
    }
    Ok(DatasetManifest { items })
}

/// A training example held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// Patch features `[n_patches × vis_width]`.
    pub features: Tensor,
    pub caption: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn load(manifest_path: &Path, vocab_size: usize) -> Result<Self, DataError> {
        let manifest = load_manifest(manifest_path, vocab_size)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut examples = Vec::with_capacity(manifest.items.len());
        for item in manifest.items {
            let features = read_features(&base.join(&item.feature_file)).map_err(|source| DataError::Features {
                id: item.id.clone(),
                source,
            })?;
            examples.push(Example {
                id: item.id,
                features,
                caption: item.caption_tokens,
                split: item.split,
            });
        }
        Ok(Self { examples })
    }

    /// Same as generating and loading, without touching the filesystem.
    pub fn synthetic(opts: &GenerateOptions) -> Result<Self, DataError> {
        let examples = generate_items(opts)?
            .into_iter()
            .map(|g| Example {
                id: g.item.id,
                features: g.features,
                caption: g.item.caption_tokens,
                split: g.item.split,
            })
            .collect();
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Examples of one split.
    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            examples: self.examples.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_layout() {
        let v = Vocab {
            n_classes: 4,
            n_levels: 4,
        };
        assert_eq!(v.caption(0, 0), [0, 2, 6, 1]);
        assert_eq!(v.caption(3, 3), [0, 5, 9, 1]);
        assert_eq!(v.instruction(0), [10, 11, 12]);
        assert_eq!(v.required_size(), 18);
    }

    #[test]
    fn token_space_too_small_is_rejected() {
        let mut o = GenerateOptions::new(1, 4);
        o.vocab_size = 17;
        assert!(matches!(
            generate_items(&o),
            Err(DataError::TokenSpace { needed: 18, vocab: 17 })
        ));
    }

    #[test]
    fn rejects_degenerate_options() {
        assert!(generate_items(&GenerateOptions::new(1, 0)).is_err());
        let mut o = GenerateOptions::new(1, 4);
        o.n_classes = 1;
        o.n_levels = 1;
        assert!(generate_items(&o).is_err());
        o.n_classes = 9;
        o.n_levels = 2;
        o.vocab_size = 64;
        assert!(generate_items(&o).is_err());
    }

    #[test]
    fn captions_follow_image_parameters() {
        let items = generate_items(&GenerateOptions::new(3, 20)).unwrap();
        let v = Vocab {
            n_classes: 4,
            n_levels: 4,
        };
        for g in items {
            assert_eq!(g.item.caption_tokens, v.caption(g.image.class_id, g.image.intensity_id));
        }
    }

    #[test]
    fn stage2_entries_reuse_images() {
        let mut o = GenerateOptions::new(3, 6);
        o.stage2_items = 2;
        let items = generate_items(&o).unwrap();
        assert_eq!(items.len(), 8);
        assert_eq!(items[6].item.split, Split::Stage2);
        assert_eq!(items[6].item.feature_file, items[0].item.feature_file);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&GenerateOptions::new(5, 1), dir.path()).unwrap();
        assert_eq!(m.items.len(), 1);
        let path = dir.path().join("manifest.jsonl");
        let first = fs::read(&path).unwrap();
        let loaded = load_manifest(&path, 32).unwrap();
        assert_eq!(loaded, m);
        write_manifest(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);

        let line = String::from_utf8(first).unwrap();
        assert!(line.starts_with(r#"{"id":"item-00000","feature_file":"features/item-00000.feat","caption_tokens":["#));
        assert!(matches!(load_manifest(&path, 5), Err(DataError::TokenRange { .. })));

        fs::write(&path, format!("{line}{line}")).unwrap();
        assert!(matches!(load_manifest(&path, 32), Err(DataError::DuplicateId { .. })));

        fs::remove_file(dir.path().join("features/item-00000.feat")).unwrap();
        fs::write(&path, &line).unwrap();
        match load_manifest(&path, 32) {
            Err(DataError::MissingFeatures { id, .. }) => assert_eq!(id, "item-00000"),
            other => panic!("expected missing-file error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_load_matches_in_memory_generation() {
        let dir = tempfile::tempdir().unwrap();
        let opts = GenerateOptions::new(8, 5);
        generate_dataset(&opts, dir.path()).unwrap();
        let loaded = Dataset::load(&dir.path().join("manifest.jsonl"), 32).unwrap();
        assert_eq!(loaded, Dataset::synthetic(&opts).unwrap());
    }
}
