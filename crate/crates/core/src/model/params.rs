//! Parameter and buffer stores, initialization, parameter counting, and the
//! binary checkpoint container.

use crate::data::Stream;
use crate::error::{Error, Result};
use crate::model::config::{BlockConfig, LayerKind, NetworkConfig};
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::{Precision, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

/// Index of a learnable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Param(pub usize);

/// Index of a batch-norm running-stats pair in a [`BufStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsId(pub usize);

/// Ordered set of named learnable tensors. Insertion order is the canonical
/// order for optimizers, checkpoints, and parameter counting.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<E> {
    names: Vec<String>,
    values: Vec<Tensor<E>>,
}

impl<E: Real> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> Param {
        self.names.push(name.into());
        self.values.push(value);
        Param(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, p: Param) -> &str {
        &self.names[p.0]
    }

    pub fn value(&self, p: Param) -> &Tensor<E> {
        &self.values[p.0]
    }

    pub fn value_mut(&mut self, p: Param) -> &mut Tensor<E> {
        &mut self.values[p.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total learnable scalars.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

/// Ordered set of named batch-norm running statistics. Buffers, not
/// parameters: never counted, never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BufStore<E> {
    names: Vec<String>,
    stats: Vec<BnStats<E>>,
}

impl<E: Real> Default for BufStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> BufStore<E> {
    pub fn new() -> Self {
        BufStore {
            names: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.names.push(name.into());
        self.stats.push(BnStats::new(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn get(&self, id: StatsId) -> &BnStats<E> {
        &self.stats[id.0]
    }

    pub fn get_mut(&mut self, id: StatsId) -> &mut BnStats<E> {
        &mut self.stats[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BnStats<E>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.stats.iter())
    }
}

/// The tape handles of every parameter, registered once per forward tape.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn register<E: Real>(tape: &mut Tape<E>, store: &ParamStore<E>, trainable: bool) -> Self {
        ParamVars {
            vars: store
                .values
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    pub fn get(&self, p: Param) -> Var {
        self.vars[p.0]
    }
}

/// Gradients rearranged to parallel a store's parameter order, pulled out
/// of a finished backward pass.
pub struct Gradmap<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Real> Gradmap<E> {
    pub fn collect(
        store: &ParamStore<E>,
        vars: &ParamVars,
        grads: &mut crate::tape::Gradients<E>,
    ) -> Self {
        Gradmap {
            grads: (0..store.len())
                .map(|i| grads.take(vars.get(Param(i))))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Tensor<E>> {
        self.grads[index].as_ref()
    }
}

/// Parameters of one batch-norm site.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: Param,
    pub beta: Param,
    pub stats: StatsId,
}

/// Parameters of one spatial graph convolution.
#[derive(Debug, Clone)]
pub enum SpatialParams {
    Adaptive {
        /// Channel-mixing weights per subset, `[C_out, C_in]`.
        w: Vec<Param>,
        /// Learned global adjacency per subset, `[N, N]`, zero-initialized.
        b: Option<Vec<Param>>,
        /// Embedding weights per subset, `[C_e, C_in]`, zero-initialized.
        theta: Option<Vec<Param>>,
        phi: Option<Vec<Param>>,
        /// 1×1 residual transform, present iff channels change and the
        /// layer residual is enabled.
        residual: Option<Param>,
    },
    Baseline {
        w: Vec<Param>,
        /// Attention mask per subset, `[N, N]`, ones-initialized.
        mask: Option<Vec<Param>>,
        residual: Option<Param>,
    },
}

impl SpatialParams {
    pub fn weights(&self) -> &[Param] {
        match self {
            SpatialParams::Adaptive { w, .. } | SpatialParams::Baseline { w, .. } => w,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub spatial: SpatialParams,
    pub bn_s: BnParams,
    /// Temporal convolution weights `[C_out, C_out, Kt, 1]`.
    pub w_t: Param,
    pub bn_t: BnParams,
    /// 1×1 strided shortcut plus its batch norm, present iff the block
    /// changes shape.
    pub shortcut: Option<(Param, BnParams)>,
}

#[derive(Debug, Clone)]
pub struct NetLayout {
    pub data_bn: BnParams,
    pub blocks: Vec<BlockParams>,
    /// Classifier weights `[C_head, num_classes]` and bias `[num_classes]`.
    pub fc_w: Param,
    pub fc_b: Param,
}

/// All state of one network: learnable tensors, running statistics, and the
/// index layout tying them to the architecture.
#[derive(Debug, Clone)]
pub struct NetParams<E> {
    pub store: ParamStore<E>,
    pub bufs: BufStore<E>,
    pub layout: NetLayout,
}

fn uniform<E: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn fan_in_uniform<E: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

pub fn build_bn<E: Real>(
    store: &mut ParamStore<E>,
    bufs: &mut BufStore<E>,
    channels: usize,
    prefix: &str,
) -> BnParams {
    let gamma = store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], E::one()));
    let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
    let stats = bufs.add(prefix, channels);
    BnParams { gamma, beta, stats }
}

/// Allocates and initializes one block. W and shortcut weights get fan-in
/// uniform init; B, θ and φ start at exactly zero; masks start at ones.
pub fn build_block<E: Real>(
    store: &mut ParamStore<E>,
    bufs: &mut BufStore<E>,
    cfg: &BlockConfig,
    num_joints: usize,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<BlockParams> {
    cfg.validate()?;
    let n = num_joints;
    let subsets = crate::graph::NUM_SUBSETS;
    let mut w = Vec::with_capacity(subsets);
    for k in 0..subsets {
        w.push(store.add(
            format!("{prefix}.subset{k}.w"),
            fan_in_uniform(rng, &[cfg.c_out, cfg.c_in], cfg.c_in),
        ));
    }
    let residual = if cfg.residual && cfg.c_in != cfg.c_out {
        Some(store.add(
            format!("{prefix}.spatial_residual"),
            fan_in_uniform(rng, &[cfg.c_out, cfg.c_in], cfg.c_in),
        ))
    } else {
        None
    };
    let spatial = match cfg.kind {
        LayerKind::Adaptive => {
            let b = cfg.toggles.use_b.then(|| {
                (0..subsets)
                    .map(|k| store.add(format!("{prefix}.subset{k}.b"), Tensor::zeros(&[n, n])))
                    .collect()
            });
            let ce = cfg.embed_width();
            let theta = cfg.toggles.use_c.then(|| {
                (0..subsets)
                    .map(|k| {
                        store.add(format!("{prefix}.subset{k}.theta"), Tensor::zeros(&[ce, cfg.c_in]))
                    })
                    .collect()
            });
            let phi = cfg.toggles.use_c.then(|| {
                (0..subsets)
                    .map(|k| {
                        store.add(format!("{prefix}.subset{k}.phi"), Tensor::zeros(&[ce, cfg.c_in]))
                    })
                    .collect()
            });
            SpatialParams::Adaptive {
                w,
                b,
                theta,
                phi,
                residual,
            }
        }
        LayerKind::Baseline => {
            let mask = cfg.use_mask.then(|| {
                (0..subsets)
                    .map(|k| {
                        store.add(
                            format!("{prefix}.subset{k}.mask"),
                            Tensor::full(&[n, n], E::one()),
                        )
                    })
                    .collect()
            });
            SpatialParams::Baseline { w, mask, residual }
        }
    };
    let bn_s = build_bn(store, bufs, cfg.c_out, &format!("{prefix}.bn_s"));
    let w_t = store.add(
        format!("{prefix}.temporal.w"),
        fan_in_uniform(
            rng,
            &[cfg.c_out, cfg.c_out, cfg.kernel_t, 1],
            cfg.c_out * cfg.kernel_t,
        ),
    );
    let bn_t = build_bn(store, bufs, cfg.c_out, &format!("{prefix}.bn_t"));
    let shortcut = if cfg.c_in != cfg.c_out || cfg.stride != 1 {
        let w = store.add(
            format!("{prefix}.shortcut.w"),
            fan_in_uniform(rng, &[cfg.c_out, cfg.c_in, 1, 1], cfg.c_in),
        );
        let bn = build_bn(store, bufs, cfg.c_out, &format!("{prefix}.bn_res"));
        Some((w, bn))
    } else {
        None
    };
    Ok(BlockParams {
        spatial,
        bn_s,
        w_t,
        bn_t,
        shortcut,
    })
}

impl<E: Real> NetParams<E> {
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut bufs = BufStore::new();
        let n = cfg.skeleton.num_joints();
        let data_channels = cfg.persons * cfg.in_channels * n;
        let data_bn = build_bn(&mut store, &mut bufs, data_channels, "data_bn");
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for (i, bc) in cfg.blocks.iter().enumerate() {
            blocks.push(build_block(
                &mut store,
                &mut bufs,
                bc,
                n,
                &format!("block{i}"),
                &mut rng,
            )?);
        }
        let head = cfg.head_channels();
        let fc_w = store.add(
            "classifier.w",
            fan_in_uniform(&mut rng, &[head, cfg.num_classes], head),
        );
        let fc_b = store.add("classifier.b", Tensor::zeros(&[cfg.num_classes]));
        Ok(NetParams {
            store,
            bufs,
            layout: NetLayout {
                data_bn,
                blocks,
                fc_w,
                fc_b,
            },
        })
    }

    pub fn count(&self) -> usize {
        self.store.total_scalars()
    }
}

/// Total learnable scalars for a configuration.
pub fn count_params(cfg: &NetworkConfig) -> Result<usize> {
    Ok(NetParams::<f32>::init(cfg, 0)?.count())
}

/// Adds a uniform perturbation to every parameter; gradient checks use this
/// to move zero-initialized tensors off their symmetric point.
pub fn perturb_uniform<E: Real>(store: &mut ParamStore<E>, rng: &mut ChaCha8Rng, amplitude: f64) {
    for i in 0..store.len() {
        for v in store.values[i].data_mut() {
            *v = *v + E::from_f64(rng.gen_range(-amplitude..amplitude));
        }
    }
}

// ── Checkpoint container ────────────────────────────────────────────────
//
// Little-endian binary layout:
//   magic "AGC1" · u32 version=1 · u8 dtype (0=f32, 1=f64) · u8 stream
//   (0=joints, 1=bones) · u32 config-text length · config text (UTF-8,
//   the NetworkConfig key-value form with embedded skeleton) ·
//   u32 param count · per param { u32 name length · name · u8 ndim ·
//   u32 dims[ndim] · raw element data } · u32 stats count · per stats
//   { u32 name length · name · u32 channels · mean data · var data }.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub precision: Precision,
    pub stream: Stream,
    pub config: NetworkConfig,
}

fn dtype_tag(p: Precision) -> u8 {
    match p {
        Precision::Single => 0,
        Precision::Double => 1,
    }
}

fn stream_tag(s: Stream) -> u8 {
    match s {
        Stream::Joints => 0,
        Stream::Bones => 1,
    }
}

fn w_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_str(out: &mut Vec<u8>, s: &str) {
    w_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn w_data<E: Real>(out: &mut Vec<u8>, t: &Tensor<E>) {
    match E::PRECISION {
        Precision::Single => {
            for &v in t.data() {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        Precision::Double => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
}

pub fn save_checkpoint<E: Real>(
    path: &Path,
    cfg: &NetworkConfig,
    stream: Stream,
    params: &NetParams<E>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    w_u32(&mut out, CHECKPOINT_VERSION);
    out.push(dtype_tag(E::PRECISION));
    out.push(stream_tag(stream));
    w_str(&mut out, &cfg.to_text()?);
    w_u32(&mut out, params.store.len() as u32);
    for (name, value) in params.store.iter() {
        w_str(&mut out, name);
        out.push(value.ndim() as u8);
        for &d in value.shape() {
            w_u32(&mut out, d as u32);
        }
        w_data(&mut out, value);
    }
    w_u32(&mut out, params.bufs.len() as u32);
    for (name, stats) in params.bufs.iter() {
        w_str(&mut out, name);
        w_u32(&mut out, stats.channels() as u32);
        w_data(&mut out, &stats.mean);
        w_data(&mut out, &stats.var);
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct CheckpointReader<R> {
    inner: R,
}

impl<R: Read> CheckpointReader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(format!("checkpoint truncated while reading {what}"))
            } else {
                Error::Io(e)
            }
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.bytes(len, what)?;
        String::from_utf8(b).map_err(|_| Error::format(format!("checkpoint: {what} is not UTF-8")))
    }

    fn tensor<E: Real>(&mut self, shape: &[usize], what: &str) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        let width = match E::PRECISION {
            Precision::Single => 4,
            Precision::Double => 8,
        };
        let b = self.bytes(n * width, what)?;
        let mut data = Vec::with_capacity(n);
        match E::PRECISION {
            Precision::Single => {
                for c in b.chunks_exact(4) {
                    data.push(E::from_f64(
                        f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
                    ));
                }
            }
            Precision::Double => {
                for c in b.chunks_exact(8) {
                    data.push(E::from_f64(f64::from_le_bytes([
                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                    ])));
                }
            }
        }
        Tensor::from_vec(shape, data)
    }
}

fn read_header(r: &mut CheckpointReader<impl Read>) -> Result<(Precision, Stream, NetworkConfig)> {
    let magic = r.bytes(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "checkpoint: bad magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let precision = match r.u8("dtype")? {
        0 => Precision::Single,
        1 => Precision::Double,
        t => return Err(Error::format(format!("checkpoint: unknown dtype tag {t}"))),
    };
    let stream = match r.u8("stream")? {
        0 => Stream::Joints,
        1 => Stream::Bones,
        t => return Err(Error::format(format!("checkpoint: unknown stream tag {t}"))),
    };
    let config = NetworkConfig::from_text(&r.string("config")?)?;
    Ok((precision, stream, config))
}

/// Reads only the header: precision, stream, and configuration.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let file = std::fs::File::open(path)?;
    let mut r = CheckpointReader {
        inner: std::io::BufReader::new(file),
    };
    let (precision, stream, config) = read_header(&mut r)?;
    Ok(CheckpointMeta {
        precision,
        stream,
        config,
    })
}

/// Loads a full checkpoint in the element type it was saved with.
pub fn load_checkpoint<E: Real>(path: &Path) -> Result<(NetworkConfig, Stream, NetParams<E>)> {
    let file = std::fs::File::open(path)?;
    let mut r = CheckpointReader {
        inner: std::io::BufReader::new(file),
    };
    let (precision, stream, config) = read_header(&mut r)?;
    if precision != E::PRECISION {
        return Err(Error::format(
            "checkpoint precision does not match the requested element type",
        ));
    }
    // The layout is a pure function of the config; values stream in by
    // position with names cross-checked.
    let mut params = NetParams::<E>::init(&config, 0)?;
    let n_params = r.u32("param count")? as usize;
    if n_params != params.store.len() {
        return Err(Error::format(format!(
            "checkpoint: {n_params} parameters, config implies {}",
            params.store.len()
        )));
    }
    for i in 0..n_params {
        let name = r.string("param name")?;
        if name != params.store.names[i] {
            return Err(Error::format(format!(
                "checkpoint: parameter {i} is '{name}', config implies '{}'",
                params.store.names[i]
            )));
        }
        let ndim = r.u8("param rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("param dim")? as usize);
        }
        if shape != params.store.values[i].shape() {
            return Err(Error::format(format!(
                "checkpoint: parameter '{name}' has shape {shape:?}, config implies {:?}",
                params.store.values[i].shape()
            )));
        }
        params.store.values[i] = r.tensor(&shape, "param data")?;
    }
    let n_stats = r.u32("stats count")? as usize;
    if n_stats != params.bufs.len() {
        return Err(Error::format(format!(
            "checkpoint: {n_stats} stat pairs, config implies {}",
            params.bufs.len()
        )));
    }
    for i in 0..n_stats {
        let name = r.string("stats name")?;
        if name != params.bufs.names[i] {
            return Err(Error::format(format!(
                "checkpoint: stats {i} is '{name}', config implies '{}'",
                params.bufs.names[i]
            )));
        }
        let channels = r.u32("stats channels")? as usize;
        if channels != params.bufs.stats[i].channels() {
            return Err(Error::format(format!(
                "checkpoint: stats '{name}' has {channels} channels, config implies {}",
                params.bufs.stats[i].channels()
            )));
        }
        params.bufs.stats[i].mean = r.tensor(&[channels], "stats mean")?;
        params.bufs.stats[i].var = r.tensor(&[channels], "stats var")?;
    }
    Ok((config, stream, params))
}
