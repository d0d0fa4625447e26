//! Declarative model configuration: sources, branch layer stacks, proposal
//! geometry and classifier widths, plus the canonical textual encoding that
//! makes checkpoints self-describing.

use crate::error::{Error, Result};

/// One layer of a feature-extractor branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { k: usize, filters: usize },
    MaxPool { k: usize, stride: usize },
}

/// Convolutional stack of a branch; a fully connected projection to the
/// source embedding follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchConfig {
    pub layers: Vec<LayerSpec>,
}

impl BranchConfig {
    /// Three 64-filter convolutions (5x5, 5x5, 3x3), max-pooled after each.
    pub fn rgb_like() -> Self {
        BranchConfig {
            layers: vec![
                LayerSpec::Conv { k: 5, filters: 64 },
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Conv { k: 5, filters: 64 },
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Conv { k: 3, filters: 64 },
                LayerSpec::MaxPool { k: 2, stride: 2 },
            ],
        }
    }

    /// Three 3x3 convolutions with 64 filters and no pooling, for sources
    /// whose patches are already at coarse spatial resolution.
    pub fn ms_like() -> Self {
        BranchConfig {
            layers: vec![
                LayerSpec::Conv { k: 3, filters: 64 },
                LayerSpec::Conv { k: 3, filters: 64 },
                LayerSpec::Conv { k: 3, filters: 64 },
            ],
        }
    }

    pub fn lidar_like() -> Self {
        Self::rgb_like()
    }

    /// Spatial side after the stack for a square input of side `side`.
    /// Convolutions are stride 1 with size-preserving padding; pooling uses
    /// ceil-mode output sizes.
    pub fn out_side(&self, side: usize) -> Result<usize> {
        let mut s = side;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { .. } => {}
                LayerSpec::MaxPool { k, stride } => {
                    if *k > s {
                        return Err(Error::Geometry(format!(
                            "pool window {k} exceeds feature map side {s}"
                        )));
                    }
                    s = (s - k).div_ceil(*stride) + 1;
                }
            }
        }
        Ok(s)
    }

    pub fn out_channels(&self, in_ch: usize) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Conv { filters, .. } => Some(*filters),
                _ => None,
            })
            .unwrap_or(in_ch)
    }

    pub fn to_text(&self) -> String {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { k, filters } => format!("c{k}x{filters}"),
                LayerSpec::MaxPool { k, stride } => format!("p{k}s{stride}"),
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for part in text.split(',').filter(|p| !p.is_empty()) {
            if let Some(rest) = part.strip_prefix('c') {
                let (k, f) = rest
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("bad branch layer `{part}`")))?;
                layers.push(LayerSpec::Conv {
                    k: parse_num(k, part)?,
                    filters: parse_num(f, part)?,
                });
            } else if let Some(rest) = part.strip_prefix('p') {
                let (k, s) = rest
                    .split_once('s')
                    .ok_or_else(|| Error::Config(format!("bad branch layer `{part}`")))?;
                layers.push(LayerSpec::MaxPool {
                    k: parse_num(k, part)?,
                    stride: parse_num(s, part)?,
                });
            } else {
                return Err(Error::Config(format!("bad branch layer `{part}`")));
            }
        }
        Ok(BranchConfig { layers })
    }
}

fn parse_num(s: &str, ctx: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Config(format!("bad number in branch layer `{ctx}`")))
}

/// Geometry and branch description of one image source.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceDescriptor {
    pub name: String,
    pub channels: usize,
    /// Side of the object-sized patch (the proposal window for additional
    /// sources; the full input for the reference).
    pub object_patch: usize,
    /// Side of the search neighborhood provided per sample.
    pub neighborhood: usize,
    pub proposal_stride: usize,
    pub is_reference: bool,
    pub embed_dim: usize,
    pub branch: BranchConfig,
}

impl SourceDescriptor {
    /// Proposal grid side: `(neighborhood - object_patch) / stride + 1`.
    pub fn grid_side(&self) -> usize {
        (self.neighborhood - self.object_patch) / self.proposal_stride + 1
    }

    /// R, the number of region proposals for this source.
    pub fn num_proposals(&self) -> usize {
        let g = self.grid_side();
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.object_patch == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "source `{}`: channels, patch sides and embed_dim must be positive",
                self.name
            )));
        }
        if self.object_patch > self.neighborhood {
            return Err(Error::Config(format!(
                "source `{}`: object patch {} exceeds neighborhood {}",
                self.name, self.object_patch, self.neighborhood
            )));
        }
        if self.proposal_stride == 0
            || (self.neighborhood - self.object_patch) % self.proposal_stride != 0
        {
            return Err(Error::Config(format!(
                "source `{}`: neighborhood minus object patch must be divisible by stride {}",
                self.name, self.proposal_stride
            )));
        }
        self.branch.out_side(self.object_patch)?;
        Ok(())
    }
}

/// Full model description shared by the attention model, the early-fusion
/// baseline and the single-source networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub sources: Vec<SourceDescriptor>,
    pub num_classes: usize,
    /// Hidden widths of the attention-model classifier; the class layer is
    /// appended automatically.
    pub classifier_widths: Vec<usize>,
    /// Hidden widths of the baseline classifier (empty means a single fully
    /// connected layer straight to class scores).
    pub baseline_widths: Vec<usize>,
    /// Dropout rate on the first two hidden classifier layers.
    pub dropout: f32,
}

impl ModelConfig {
    /// The published three-source configuration: RGB 3ch 25x25 reference,
    /// 8-channel MS-like source with 4x4 windows in a 12x12 neighborhood at
    /// stride 1, and a 1-channel LiDAR-like source with 8x8 windows in a
    /// 24x24 neighborhood at stride 2 (81 proposals each).
    pub fn paper_default(num_classes: usize) -> Self {
        ModelConfig {
            sources: vec![
                SourceDescriptor {
                    name: "rgb".into(),
                    channels: 3,
                    object_patch: 25,
                    neighborhood: 25,
                    proposal_stride: 1,
                    is_reference: true,
                    embed_dim: 128,
                    branch: BranchConfig::rgb_like(),
                },
                SourceDescriptor {
                    name: "ms".into(),
                    channels: 8,
                    object_patch: 4,
                    neighborhood: 12,
                    proposal_stride: 1,
                    is_reference: false,
                    embed_dim: 128,
                    branch: BranchConfig::ms_like(),
                },
                SourceDescriptor {
                    name: "lidar".into(),
                    channels: 1,
                    object_patch: 8,
                    neighborhood: 24,
                    proposal_stride: 2,
                    is_reference: false,
                    embed_dim: 128,
                    branch: BranchConfig::lidar_like(),
                },
            ],
            num_classes,
            classifier_widths: vec![128, 64, 32],
            baseline_widths: Vec::new(),
            dropout: 0.5,
        }
    }

    /// Two-source variant (reference plus one additional source), used by the
    /// proposal-size sweep.
    pub fn retain_sources(&self, names: &[&str]) -> Result<ModelConfig> {
        let mut cfg = self.clone();
        cfg.sources = self
            .sources
            .iter()
            .filter(|s| names.contains(&s.name.as_str()))
            .cloned()
            .collect();
        if cfg.sources.len() != names.len() {
            return Err(Error::Config(format!(
                "unknown source in {names:?}; have {:?}",
                self.sources.iter().map(|s| &s.name).collect::<Vec<_>>()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let refs = self.sources.iter().filter(|s| s.is_reference).count();
        if refs != 1 {
            return Err(Error::Config(format!(
                "exactly one reference source required, found {refs}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.sources {
            s.validate()?;
            if !names.insert(s.name.clone()) {
                return Err(Error::Config(format!("duplicate source name `{}`", s.name)));
            }
        }
        Ok(())
    }

    pub fn reference_index(&self) -> usize {
        self.sources
            .iter()
            .position(|s| s.is_reference)
            .expect("validated config has a reference")
    }

    /// Indices of non-reference sources, in configuration order.
    pub fn additional_indices(&self) -> Vec<usize> {
        self.sources
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_reference)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn source_index(&self, name: &str) -> Result<usize> {
        self.sources
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("unknown source `{name}`")))
    }

    /// Width of the fused representation: reference embedding first, then
    /// additional sources in configuration order.
    pub fn fused_dim(&self) -> usize {
        self.sources.iter().map(|s| s.embed_dim).sum()
    }
}

/// Which network a checkpoint contains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Mran,
    Baseline,
    Single { source: String, patch: usize },
}

impl ModelKind {
    pub fn parse(text: &str) -> Result<ModelKind> {
        match text {
            "mran" => Ok(ModelKind::Mran),
            "baseline" => Ok(ModelKind::Baseline),
            other => {
                if let Some(rest) = other.strip_prefix("single:") {
                    Ok(ModelKind::Single {
                        source: rest.to_string(),
                        patch: 0,
                    })
                } else {
                    Err(Error::Usage(format!(
                        "unknown model kind `{other}` (expected mran, baseline or single:<source>)"
                    )))
                }
            }
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Mran => write!(f, "mran"),
            ModelKind::Baseline => write!(f, "baseline"),
            ModelKind::Single { source, .. } => write!(f, "single:{source}"),
        }
    }
}

fn widths_to_text(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn widths_parse(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad width `{p}`"))))
        .collect()
}

/// Canonical key=value encoding of a (kind, config) pair. Stable key order,
/// LF line endings; `parse_config_text` inverts it exactly.
pub fn config_to_text(kind: &ModelKind, cfg: &ModelConfig) -> String {
    let mut out = String::new();
    out.push_str("format=mran-model-config\n");
    out.push_str("config_version=1\n");
    let kind_txt = match kind {
        ModelKind::Mran => "mran".to_string(),
        ModelKind::Baseline => "baseline".to_string(),
        ModelKind::Single { source, .. } => format!("single:{source}"),
    };
    out.push_str(&format!("kind={kind_txt}\n"));
    if let ModelKind::Single { patch, .. } = kind {
        out.push_str(&format!("single_patch={patch}\n"));
    }
    out.push_str(&format!("num_classes={}\n", cfg.num_classes));
    out.push_str(&format!("classifier={}\n", widths_to_text(&cfg.classifier_widths)));
    out.push_str(&format!("baseline_classifier={}\n", widths_to_text(&cfg.baseline_widths)));
    out.push_str(&format!("dropout={}\n", cfg.dropout));
    out.push_str(&format!("sources={}\n", cfg.sources.len()));
    for (i, s) in cfg.sources.iter().enumerate() {
        out.push_str(&format!("source.{i}.name={}\n", s.name));
        out.push_str(&format!("source.{i}.channels={}\n", s.channels));
        out.push_str(&format!("source.{i}.object_patch={}\n", s.object_patch));
        out.push_str(&format!("source.{i}.neighborhood={}\n", s.neighborhood));
        out.push_str(&format!("source.{i}.proposal_stride={}\n", s.proposal_stride));
        out.push_str(&format!("source.{i}.is_reference={}\n", s.is_reference));
        out.push_str(&format!("source.{i}.embed_dim={}\n", s.embed_dim));
        out.push_str(&format!("source.{i}.branch={}\n", s.branch.to_text()));
    }
    out
}

pub fn parse_config_text(text: &str) -> Result<(ModelKind, ModelConfig)> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad config line `{line}`")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Config(format!("missing config key `{k}`")))
    };
    if get("format")? != "mran-model-config" {
        return Err(Error::Config("not a model config block".into()));
    }
    let mut kind = ModelKind::parse(get("kind")?)?;
    if let ModelKind::Single { ref mut patch, .. } = kind {
        *patch = get("single_patch")?
            .parse()
            .map_err(|_| Error::Config("bad single_patch".into()))?;
    }
    let n_sources: usize = get("sources")?
        .parse()
        .map_err(|_| Error::Config("bad sources count".into()))?;
    let mut sources = Vec::with_capacity(n_sources);
    for i in 0..n_sources {
        let field = |f: &str| -> Result<&String> { get(&format!("source.{i}.{f}")) };
        let num = |f: &str| -> Result<usize> {
            field(f)?
                .parse()
                .map_err(|_| Error::Config(format!("bad source.{i}.{f}")))
        };
        sources.push(SourceDescriptor {
            name: field("name")?.clone(),
            channels: num("channels")?,
            object_patch: num("object_patch")?,
            neighborhood: num("neighborhood")?,
            proposal_stride: num("proposal_stride")?,
            is_reference: field("is_reference")? == "true",
            embed_dim: num("embed_dim")?,
            branch: BranchConfig::parse(field("branch")?)?,
        });
    }
    let cfg = ModelConfig {
        sources,
        num_classes: get("num_classes")?
            .parse()
            .map_err(|_| Error::Config("bad num_classes".into()))?,
        classifier_widths: widths_parse(get("classifier")?)?,
        baseline_widths: widths_parse(get("baseline_classifier")?)?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| Error::Config("bad dropout".into()))?,
    };
    cfg.validate()?;
    Ok((kind, cfg))
}

/// Grid of normalized attention weights for one source of one sample.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub source: String,
    /// Row-major `side x side` grid; entries are non-negative and sum to 1.
    pub grid: Vec<f32>,
    pub side: usize,
    /// Pixel offset `(dx, dy)` of the highest-weight proposal window.
    pub argmax_offset: (usize, usize),
}

impl AttentionMap {
    pub fn from_alpha(source: &str, alpha: &[f32], side: usize, stride: usize) -> Self {
        let mut best = 0usize;
        for (i, v) in alpha.iter().enumerate() {
            if *v > alpha[best] {
                best = i;
            }
        }
        let (gy, gx) = (best / side, best % side);
        AttentionMap {
            source: source.to_string(),
            grid: alpha.to_vec(),
            side,
            argmax_offset: (gx * stride, gy * stride),
        }
    }
}
