//! Block and network configuration.

use crate::error::{Error, Result};
use crate::graph::SkeletonSpec;

/// Which graph terms the adaptive layer sums: the fixed physical adjacency
/// (A), the learned global adjacency (B), and the data-dependent similarity
/// graph (C).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphToggles {
    pub use_a: bool,
    pub use_b: bool,
    pub use_c: bool,
}

impl GraphToggles {
    pub fn all() -> Self {
        GraphToggles {
            use_a: true,
            use_b: true,
            use_c: true,
        }
    }

    pub fn any(&self) -> bool {
        self.use_a || self.use_b || self.use_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Adaptive,
    Baseline,
}

impl LayerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(LayerKind::Adaptive),
            "baseline" => Ok(LayerKind::Baseline),
            other => Err(Error::invalid(format!(
                "layer_kind must be 'adaptive' or 'baseline', got '{other}'"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Adaptive => "adaptive",
            LayerKind::Baseline => "baseline",
        }
    }
}

/// One spatial+temporal block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Temporal stride of the Kt×1 convolution (and of the shortcut).
    pub stride: usize,
    /// Temporal kernel size; must be odd.
    pub kernel_t: usize,
    pub dropout: f64,
    pub kind: LayerKind,
    pub toggles: GraphToggles,
    /// Baseline attention mask M_k; ignored by adaptive layers.
    pub use_mask: bool,
    /// Residual inside the spatial layer (identity when channels match,
    /// 1×1 transform otherwise).
    pub residual: bool,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::invalid("block: channel counts must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("block: stride must be positive"));
        }
        if self.kernel_t % 2 == 0 || self.kernel_t == 0 {
            return Err(Error::invalid(format!(
                "block: temporal kernel {} must be odd",
                self.kernel_t
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "block: dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.kind == LayerKind::Adaptive && !self.toggles.any() {
            return Err(Error::invalid(
                "block: adaptive layer with A, B and C all disabled has no graph term",
            ));
        }
        Ok(())
    }

    /// Embedding width of the similarity branch: a quarter of the output
    /// channels, at least 1.
    pub fn embed_width(&self) -> usize {
        embed_width(self.c_out)
    }
}

pub fn embed_width(c_out: usize) -> usize {
    (c_out / 4).max(1)
}

pub const NUM_BLOCKS: usize = 9;
pub const DEFAULT_CHANNELS: [usize; NUM_BLOCKS] = [64, 64, 64, 128, 128, 128, 256, 256, 256];
/// Small plan with the same topology for desk-scale experiments.
pub const COMPACT_CHANNELS: [usize; NUM_BLOCKS] = [8, 8, 8, 16, 16, 16, 32, 32, 32];
/// Temporal downsampling at the two channel-doubling blocks.
pub const DEFAULT_STRIDES: [usize; NUM_BLOCKS] = [1, 1, 1, 2, 1, 1, 2, 1, 1];
pub const DEFAULT_KERNEL_T: usize = 9;
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// The 9-block network: skeleton, block plan, classifier width.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub skeleton: SkeletonSpec,
    pub blocks: Vec<BlockConfig>,
    pub num_classes: usize,
    /// Coordinate channels of the input data (2 or 3).
    pub in_channels: usize,
    /// Maximum persons per sample; absent persons are zero-padded.
    pub persons: usize,
    /// Optional class labels for reports; empty or `num_classes` long.
    pub class_names: Vec<String>,
}

impl NetworkConfig {
    pub fn with_plan(
        skeleton: SkeletonSpec,
        in_channels: usize,
        num_classes: usize,
        persons: usize,
        channels: &[usize],
        strides: &[usize],
    ) -> Result<Self> {
        if channels.len() != NUM_BLOCKS || strides.len() != NUM_BLOCKS {
            return Err(Error::invalid(format!(
                "network: need {NUM_BLOCKS} channel and stride entries, got {} and {}",
                channels.len(),
                strides.len()
            )));
        }
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut c_in = in_channels;
        for (&c_out, &stride) in channels.iter().zip(strides) {
            blocks.push(BlockConfig {
                c_in,
                c_out,
                stride,
                kernel_t: DEFAULT_KERNEL_T,
                dropout: DEFAULT_DROPOUT,
                kind: LayerKind::Adaptive,
                toggles: GraphToggles::all(),
                use_mask: true,
                residual: true,
            });
            c_in = c_out;
        }
        let cfg = NetworkConfig {
            skeleton,
            blocks,
            num_classes,
            in_channels,
            persons,
            class_names: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-width plan (64..256 channels).
    pub fn agcn(
        skeleton: SkeletonSpec,
        in_channels: usize,
        num_classes: usize,
        persons: usize,
    ) -> Result<Self> {
        Self::with_plan(
            skeleton,
            in_channels,
            num_classes,
            persons,
            &DEFAULT_CHANNELS,
            &DEFAULT_STRIDES,
        )
    }

    /// Desk-scale plan (8..32 channels), same topology.
    pub fn compact(
        skeleton: SkeletonSpec,
        in_channels: usize,
        num_classes: usize,
        persons: usize,
    ) -> Result<Self> {
        Self::with_plan(
            skeleton,
            in_channels,
            num_classes,
            persons,
            &COMPACT_CHANNELS,
            &DEFAULT_STRIDES,
        )
    }

    pub fn set_kind(&mut self, kind: LayerKind) {
        for b in &mut self.blocks {
            b.kind = kind;
        }
    }

    pub fn set_toggles(&mut self, toggles: GraphToggles) {
        for b in &mut self.blocks {
            b.toggles = toggles;
        }
    }

    pub fn set_use_mask(&mut self, use_mask: bool) {
        for b in &mut self.blocks {
            b.use_mask = use_mask;
        }
    }

    pub fn set_dropout(&mut self, rate: f64) {
        for b in &mut self.blocks {
            b.dropout = rate;
        }
    }

    pub fn set_kernel_t(&mut self, kernel_t: usize) {
        for b in &mut self.blocks {
            b.kernel_t = kernel_t;
        }
    }

    pub fn head_channels(&self) -> usize {
        self.blocks.last().map(|b| b.c_out).unwrap_or(0)
    }

    /// The fixed normalized adjacency stack of this network's skeleton,
    /// with the default α regularizer.
    pub fn adjacency(&self) -> Result<crate::graph::NormalizedAdjacency> {
        let pa = crate::graph::build_partitions(&self.skeleton)?;
        crate::graph::normalize(&pa, crate::graph::DEFAULT_ALPHA)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.in_channels) {
            return Err(Error::invalid(format!(
                "network: in_channels must be 2 or 3, got {}",
                self.in_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("network: need at least 2 classes"));
        }
        if self.persons == 0 {
            return Err(Error::invalid("network: persons must be positive"));
        }
        if self.blocks.len() != NUM_BLOCKS {
            return Err(Error::invalid(format!(
                "network: expected {NUM_BLOCKS} blocks, got {}",
                self.blocks.len()
            )));
        }
        let mut c_in = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.c_in != c_in {
                return Err(Error::invalid(format!(
                    "network: block {i} expects {} input channels, chain provides {c_in}",
                    b.c_in
                )));
            }
            b.validate()
                .map_err(|e| Error::invalid(format!("network block {i}: {e}")))?;
            c_in = b.c_out;
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "network: {} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Serializes to the key-value text embedded in checkpoints. Block
    /// settings other than channels/strides must be uniform across blocks.
    pub fn to_text(&self) -> Result<String> {
        let b0 = &self.blocks[0];
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel_t != b0.kernel_t
                || b.dropout != b0.dropout
                || b.kind != b0.kind
                || b.toggles != b0.toggles
                || b.use_mask != b0.use_mask
                || b.residual != b0.residual
            {
                return Err(Error::invalid(format!(
                    "network: block {i} differs from block 0; the text form stores uniform block settings"
                )));
            }
        }
        let channels: Vec<String> = self.blocks.iter().map(|b| b.c_out.to_string()).collect();
        let strides: Vec<String> = self.blocks.iter().map(|b| b.stride.to_string()).collect();
        let mut out = String::new();
        out.push_str(&format!("num_classes = {}\n", self.num_classes));
        out.push_str(&format!("in_channels = {}\n", self.in_channels));
        out.push_str(&format!("persons = {}\n", self.persons));
        out.push_str(&format!("layer_kind = {}\n", b0.kind.as_str()));
        out.push_str(&format!("use_a = {}\n", b0.toggles.use_a));
        out.push_str(&format!("use_b = {}\n", b0.toggles.use_b));
        out.push_str(&format!("use_c = {}\n", b0.toggles.use_c));
        out.push_str(&format!("use_m = {}\n", b0.use_mask));
        out.push_str(&format!("residual = {}\n", b0.residual));
        out.push_str(&format!("channels = {}\n", channels.join(",")));
        out.push_str(&format!("strides = {}\n", strides.join(",")));
        out.push_str(&format!("temporal_kernel = {}\n", b0.kernel_t));
        out.push_str(&format!("dropout = {}\n", b0.dropout));
        if !self.class_names.is_empty() {
            out.push_str(&format!("class_names = {}\n", self.class_names.join(",")));
        }
        out.push_str("[skeleton]\n");
        out.push_str(&self.skeleton.to_text());
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (head, skel) = text.split_once("[skeleton]").ok_or_else(|| {
            Error::format("network config text: missing [skeleton] section")
        })?;
        let skeleton = SkeletonSpec::parse(skel, "skeleton")?;
        let mut kv = std::collections::BTreeMap::new();
        for (lineno, raw) in head.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(format!(
                    "network config text line {}: expected key = value",
                    lineno + 1
                ))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::format(format!("network config text: missing '{k}'")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("network config text: bad '{k}'")))
        };
        let parse_bool = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("network config text: bad '{k}'")))
        };
        let parse_list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| Error::format(format!("network config text: bad '{k}'")))
                })
                .collect()
        };
        let channels = parse_list("channels")?;
        let strides = parse_list("strides")?;
        let mut cfg = NetworkConfig::with_plan(
            skeleton,
            parse_usize("in_channels")?,
            parse_usize("num_classes")?,
            parse_usize("persons")?,
            &channels,
            &strides,
        )?;
        cfg.set_kind(LayerKind::parse(&get("layer_kind")?)?);
        cfg.set_toggles(GraphToggles {
            use_a: parse_bool("use_a")?,
            use_b: parse_bool("use_b")?,
            use_c: parse_bool("use_c")?,
        });
        cfg.set_use_mask(parse_bool("use_m")?);
        let residual = parse_bool("residual")?;
        for b in &mut cfg.blocks {
            b.residual = residual;
        }
        cfg.set_kernel_t(parse_usize("temporal_kernel")?);
        let dropout: f64 = get("dropout")?
            .parse()
            .map_err(|_| Error::format("network config text: bad 'dropout'"))?;
        cfg.set_dropout(dropout);
        if let Some(names) = kv.get("class_names") {
            cfg.class_names = names.split(',').map(|s| s.trim().to_string()).collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
