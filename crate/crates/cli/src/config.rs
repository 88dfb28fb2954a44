//! Run configuration: line-oriented `key = value` under section headers.
//! Unknown sections or keys are rejected, and validation reports every
//! problem at once so a config can be fixed in one pass.

use agcn_core::data::{DatasetManifest, Stream};
use agcn_core::graph;
use agcn_core::model::{GraphToggles, LayerKind, NetworkConfig, DEFAULT_STRIDES, NUM_BLOCKS};
use agcn_core::tensor::Precision;
use agcn_core::train::{AugmentCfg, Hyper, LrSchedule};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub stream: Stream,
    pub precision: Precision,
    pub manifest: PathBuf,
    pub augment: bool,
    pub crop_frames: Option<usize>,
    pub skeleton: String,
    pub layer_kind: LayerKind,
    pub toggles: GraphToggles,
    pub use_mask: bool,
    pub residual: bool,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
    pub dropout: f64,
    pub persons: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
}

struct Section {
    entries: BTreeMap<String, (String, usize)>,
}

fn parse_sections(text: &str, errors: &mut Vec<String>) -> BTreeMap<String, Section> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if !matches!(name.as_str(), "run" | "data" | "model" | "train") {
                errors.push(format!("line {}: unknown section [{name}]", lineno + 1));
            }
            sections.entry(name.clone()).or_insert(Section {
                entries: BTreeMap::new(),
            });
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {}: expected 'key = value'", lineno + 1));
            continue;
        };
        let Some(section) = &current else {
            errors.push(format!(
                "line {}: key outside any section",
                lineno + 1
            ));
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let entries = &mut sections.get_mut(section).unwrap().entries;
        if entries.insert(key.clone(), (value, lineno + 1)).is_some() {
            errors.push(format!(
                "line {}: duplicate key '{key}' in [{section}]",
                lineno + 1
            ));
        }
    }
    sections
}

struct SectionReader<'e> {
    name: &'static str,
    entries: BTreeMap<String, (String, usize)>,
    errors: &'e mut Vec<String>,
}

impl<'e> SectionReader<'e> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        match self.take(key) {
            None => default,
            Some(v) => v.parse().unwrap_or_else(|_| {
                self.errors
                    .push(format!("[{}] {key}: cannot parse '{v}'", self.name));
                default
            }),
        }
    }

    fn parsed_list(&mut self, key: &str, default: Vec<usize>) -> Vec<usize> {
        match self.take(key) {
            None => default,
            Some(v) if v.trim().is_empty() => Vec::new(),
            Some(v) => {
                let mut out = Vec::new();
                for tok in v.split(',') {
                    match tok.trim().parse() {
                        Ok(x) => out.push(x),
                        Err(_) => {
                            self.errors
                                .push(format!("[{}] {key}: cannot parse '{tok}'", self.name));
                            return default;
                        }
                    }
                }
                out
            }
        }
    }

    fn finish(self) {
        for (key, (_, lineno)) in self.entries {
            self.errors.push(format!(
                "line {lineno}: unknown key '{key}' in [{}]",
                self.name
            ));
        }
    }
}

impl RunConfig {
    /// Parses and validates; on failure returns every problem found.
    /// Relative paths are resolved against `base_dir` (the config file's
    /// directory).
    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig, Vec<String>> {
        let mut errors = Vec::new();
        let mut sections = parse_sections(text, &mut errors);
        fn section_entries(
            sections: &mut BTreeMap<String, Section>,
            name: &str,
        ) -> BTreeMap<String, (String, usize)> {
            sections.remove(name).map(|s| s.entries).unwrap_or_default()
        }

        let mut run = SectionReader {
            name: "run",
            entries: section_entries(&mut sections, "run"),
            errors: &mut errors,
        };
        let seed: u64 = run.parsed("seed", 0);
        let stream = match run.take("stream") {
            None => Stream::Joints,
            Some(v) => Stream::parse(&v).unwrap_or_else(|e| {
                run.errors.push(format!("[run] stream: {e}"));
                Stream::Joints
            }),
        };
        let precision = match run.take("precision").as_deref() {
            None | Some("single") => Precision::Single,
            Some("double") => Precision::Double,
            Some(other) => {
                run.errors
                    .push(format!("[run] precision: expected single|double, got '{other}'"));
                Precision::Single
            }
        };
        run.finish();

        let mut data = SectionReader {
            name: "data",
            entries: section_entries(&mut sections, "data"),
            errors: &mut errors,
        };
        let manifest = match data.take("manifest") {
            Some(p) => {
                let path = PathBuf::from(&p);
                if path.is_absolute() {
                    path
                } else {
                    base_dir.join(path)
                }
            }
            None => {
                data.errors.push("[data] manifest: missing".to_string());
                PathBuf::new()
            }
        };
        let augment: bool = data.parsed("augment", false);
        let crop_frames = data.take("crop_frames").map(|v| {
            v.parse().unwrap_or_else(|_| {
                data.errors
                    .push(format!("[data] crop_frames: cannot parse '{v}'"));
                0
            })
        });
        data.finish();

        let mut model = SectionReader {
            name: "model",
            entries: section_entries(&mut sections, "model"),
            errors: &mut errors,
        };
        let skeleton = model.take("skeleton").unwrap_or_else(|| {
            model.errors.push("[model] skeleton: missing".to_string());
            String::new()
        });
        let layer_kind = match model.take("layer_kind") {
            None => LayerKind::Adaptive,
            Some(v) => LayerKind::parse(&v).unwrap_or_else(|e| {
                model.errors.push(format!("[model] layer_kind: {e}"));
                LayerKind::Adaptive
            }),
        };
        let toggles = GraphToggles {
            use_a: model.parsed("use_a", true),
            use_b: model.parsed("use_b", true),
            use_c: model.parsed("use_c", true),
        };
        let use_mask: bool = model.parsed("use_m", true);
        let residual: bool = model.parsed("residual", true);
        let channels = model.parsed_list("channels", Vec::new());
        let strides = model.parsed_list("strides", DEFAULT_STRIDES.to_vec());
        let temporal_kernel: usize = model.parsed("temporal_kernel", 9);
        let dropout: f64 = model.parsed("dropout", 0.5);
        let persons: usize = model.parsed("persons", 1);
        model.finish();

        let mut train = SectionReader {
            name: "train",
            entries: section_entries(&mut sections, "train"),
            errors: &mut errors,
        };
        let batch: usize = train.parsed("batch", 16);
        let epochs: usize = train.parsed("epochs", 100);
        let lr: f64 = train.parsed("lr", 0.1);
        let momentum: f64 = train.parsed("momentum", 0.9);
        let nesterov: bool = train.parsed("nesterov", true);
        let weight_decay: f64 = train.parsed("weight_decay", 1e-4);
        let milestones = train.parsed_list("milestones", vec![60, 80]);
        let lr_decay: f64 = train.parsed("lr_decay", 0.1);
        train.finish();

        for (name, _) in sections {
            errors.push(format!("unknown section [{name}]"));
        }

        let cfg = RunConfig {
            seed,
            stream,
            precision,
            manifest,
            augment,
            crop_frames,
            skeleton,
            layer_kind,
            toggles,
            use_mask,
            residual,
            channels,
            strides,
            temporal_kernel,
            dropout,
            persons,
            batch,
            epochs,
            lr,
            momentum,
            nesterov,
            weight_decay,
            milestones,
            lr_decay,
        };
        cfg.validate(&mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    fn validate(&self, errors: &mut Vec<String>) {
        if self.skeleton.is_empty() {
            // already reported
        } else if let Err(e) = graph::resolve_spec(&self.skeleton) {
            errors.push(format!("[model] skeleton: {e}"));
        }
        if self.channels.len() != NUM_BLOCKS {
            errors.push(format!(
                "[model] channels: need {NUM_BLOCKS} comma-separated values, got {}",
                self.channels.len()
            ));
        }
        if self.strides.len() != NUM_BLOCKS {
            errors.push(format!(
                "[model] strides: need {NUM_BLOCKS} comma-separated values, got {}",
                self.strides.len()
            ));
        }
        if self.temporal_kernel % 2 == 0 {
            errors.push(format!(
                "[model] temporal_kernel: {} is even",
                self.temporal_kernel
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!("[model] dropout: {} outside [0, 1)", self.dropout));
        }
        if self.layer_kind == LayerKind::Adaptive && !self.toggles.any() {
            errors.push(
                "[model] use_a, use_b, use_c: all disabled leaves the adaptive layer without a graph term"
                    .to_string(),
            );
        }
        if self.persons == 0 {
            errors.push("[model] persons: must be positive".to_string());
        }
        if self.batch == 0 {
            errors.push("[train] batch: must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errors.push(format!("[train] momentum: {} outside [0, 1)", self.momentum));
        }
        if self.lr <= 0.0 {
            errors.push(format!("[train] lr: {} must be positive", self.lr));
        }
        if self.lr_decay <= 0.0 {
            errors.push(format!(
                "[train] lr_decay: {} must be positive",
                self.lr_decay
            ));
        }
        if self.weight_decay < 0.0 {
            errors.push("[train] weight_decay: negative".to_string());
        }
        for w in self.milestones.windows(2) {
            if w[0] >= w[1] {
                errors.push(format!(
                    "[train] milestones: not strictly increasing ({:?})",
                    self.milestones
                ));
                break;
            }
        }
        if let (Some(&last), true) = (self.milestones.last(), self.epochs > 0) {
            if last >= self.epochs {
                errors.push(format!(
                    "[train] milestones: {last} not before end epoch {}",
                    self.epochs
                ));
            }
        }
        if self.augment && self.crop_frames.is_none() {
            errors.push("[data] crop_frames: required when augment = true".to_string());
        }
        if !self.augment && self.crop_frames.is_some() {
            errors.push("[data] crop_frames: set but augment = false".to_string());
        }
    }

    /// Canonical resolved form, written next to each run's outputs.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        out.push_str("[run]\n");
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("stream = {}\n", self.stream));
        out.push_str(&format!(
            "precision = {}\n",
            match self.precision {
                Precision::Single => "single",
                Precision::Double => "double",
            }
        ));
        out.push_str("\n[data]\n");
        out.push_str(&format!("manifest = {}\n", self.manifest.display()));
        out.push_str(&format!("augment = {}\n", self.augment));
        if let Some(c) = self.crop_frames {
            out.push_str(&format!("crop_frames = {c}\n"));
        }
        out.push_str("\n[model]\n");
        out.push_str(&format!("skeleton = {}\n", self.skeleton));
        out.push_str(&format!("layer_kind = {}\n", self.layer_kind.as_str()));
        out.push_str(&format!("use_a = {}\n", self.toggles.use_a));
        out.push_str(&format!("use_b = {}\n", self.toggles.use_b));
        out.push_str(&format!("use_c = {}\n", self.toggles.use_c));
        out.push_str(&format!("use_m = {}\n", self.use_mask));
        out.push_str(&format!("residual = {}\n", self.residual));
        out.push_str(&format!("channels = {}\n", list(&self.channels)));
        out.push_str(&format!("strides = {}\n", list(&self.strides)));
        out.push_str(&format!("temporal_kernel = {}\n", self.temporal_kernel));
        out.push_str(&format!("dropout = {}\n", self.dropout));
        out.push_str(&format!("persons = {}\n", self.persons));
        out.push_str("\n[train]\n");
        out.push_str(&format!("batch = {}\n", self.batch));
        out.push_str(&format!("epochs = {}\n", self.epochs));
        out.push_str(&format!("lr = {}\n", self.lr));
        out.push_str(&format!("momentum = {}\n", self.momentum));
        out.push_str(&format!("nesterov = {}\n", self.nesterov));
        out.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        out.push_str(&format!("milestones = {}\n", list(&self.milestones)));
        out.push_str(&format!("lr_decay = {}\n", self.lr_decay));
        out
    }

    /// Assembles the network configuration; class count, input channels
    /// and frame length come from the manifest.
    pub fn network_config(&self, manifest: &DatasetManifest) -> agcn_core::Result<NetworkConfig> {
        let skeleton = graph::resolve_spec(&self.skeleton)?;
        let mut cfg = NetworkConfig::with_plan(
            skeleton,
            manifest.channels,
            manifest.num_classes(),
            self.persons,
            &self.channels,
            &self.strides,
        )?;
        cfg.set_kind(self.layer_kind);
        cfg.set_toggles(self.toggles);
        cfg.set_use_mask(self.use_mask);
        cfg.set_kernel_t(self.temporal_kernel);
        cfg.set_dropout(self.dropout);
        for b in &mut cfg.blocks {
            b.residual = self.residual;
        }
        cfg.class_names = manifest.class_names.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hyper(&self) -> agcn_core::Result<Hyper> {
        let hyper = Hyper {
            batch_size: self.batch,
            epochs: self.epochs,
            schedule: LrSchedule::new(
                self.lr,
                self.milestones.clone(),
                self.lr_decay,
                self.epochs.max(self.milestones.last().map(|m| m + 1).unwrap_or(1)),
            )?,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            seed: self.seed,
            augment: self.crop_frames.map(|crop_frames| AugmentCfg { crop_frames }),
            progress: false,
        };
        hyper.validate()?;
        Ok(hyper)
    }
}
